from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from src.core import (
    KL,
    DivergenceKind,
    PromptDist,
    RewardTable,
    SoftmaxPolicy,
    chi2_divergence,
    kl_divergence,
    log_sigmoid,
    phi,
    phi_inverse,
    sigmoid,
)
from src.errors import DimensionError, DomainError


def test_log_sigmoid_is_stable_at_extremes() -> None:
    assert log_sigmoid(0.0) == pytest.approx(-math.log(2.0))
    assert log_sigmoid(-1000.0) == pytest.approx(-1000.0)
    assert log_sigmoid(1000.0) == pytest.approx(0.0, abs=1e-300)
    values = log_sigmoid(np.array([-50.0, 0.0, 50.0]))
    assert isinstance(values, np.ndarray)
    assert np.all(np.isfinite(values))


def test_sigmoid_symmetry() -> None:
    t = np.linspace(-30, 30, 61)
    assert np.allclose(sigmoid(t) + sigmoid(-t), 1.0, atol=1e-15)


def test_hand_values() -> None:
    assert sigmoid(math.log(3.0)) == pytest.approx(0.75, rel=1e-15)
    assert log_sigmoid(2.0) == pytest.approx(-math.log1p(math.exp(-2.0)), rel=1e-15)
    t = np.linspace(-40.0, 40.0, 81)
    assert np.allclose(log_sigmoid(t) - log_sigmoid(-t), t, rtol=0.0, atol=1e-12)


def test_log_sigmoid_rejects_nan() -> None:
    with pytest.raises(DomainError):
        log_sigmoid(float("nan"))


@pytest.mark.parametrize("kind", [DivergenceKind.chi2(), DivergenceKind.mixed(0.5), DivergenceKind.mixed(3.0)])
def test_phi_inverse_round_trip(kind: DivergenceKind) -> None:
    v = np.linspace(-30.0, 50.0, 801)
    x = phi_inverse(v, kind)
    assert np.all(x > 0)
    assert np.allclose(phi(x, kind), v, rtol=1e-11, atol=1e-11)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 1.0])
def test_phi_inverse_on_log_grid(gamma: float) -> None:
    kind = DivergenceKind.mixed(gamma)
    x = np.logspace(-4.0, 4.0, 161)
    v = phi(x, kind)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        recovered = phi_inverse(v, kind)
    assert np.max(np.abs(recovered - x)) <= 1e-10
    residual = np.abs(phi(recovered, kind) - v)
    assert np.all(residual <= np.maximum(1e-12, 16.0 * np.spacing(np.abs(v))))
    small = np.abs(v) < 100.0
    assert np.all(residual[small] <= 1e-12)


def test_phi_examples() -> None:
    chi2 = DivergenceKind.chi2()
    assert phi(1.0, KL) == 0.0
    assert phi(1.0, chi2) == 1.0
    half = DivergenceKind.mixed(0.5)
    for x in (0.1, 1.0, 7.0):
        assert phi_inverse(phi(x, half), half) == pytest.approx(x, abs=1e-10)


def test_phi_inverse_kl_is_exp() -> None:
    v = np.array([-3.0, 0.0, 2.5])
    assert np.allclose(phi_inverse(v, KL), np.exp(v))
    assert phi_inverse(0.0, DivergenceKind.chi2()) == pytest.approx(
        # γ x + log x = 0 at γ = 1
        0.5671432904097838
    )


def test_phi_rejects_non_positive() -> None:
    with pytest.raises(DomainError):
        phi(0.0)


def test_divergence_gamma() -> None:
    assert KL.gamma == 0.0
    assert DivergenceKind.chi2().gamma == 1.0
    assert DivergenceKind.mixed(0.25).gamma == 0.25
    with pytest.raises(DomainError):
        DivergenceKind.mixed(-1.0)


def test_divergences_vanish_on_identical_policies() -> None:
    policy = SoftmaxPolicy(np.random.default_rng(0).standard_normal((4, 5)))
    nu = PromptDist.uniform(4)
    assert kl_divergence(policy, policy, nu) == pytest.approx(0.0, abs=1e-15)
    assert chi2_divergence(policy, policy, nu) == pytest.approx(0.0, abs=1e-14)


def test_divergences_are_non_negative() -> None:
    rng = np.random.default_rng(1)
    nu = PromptDist.from_unnormalised(rng.random(3) + 0.1)
    for _ in range(20):
        p = SoftmaxPolicy(rng.standard_normal((3, 4)))
        q = SoftmaxPolicy(rng.standard_normal((3, 4)))
        assert kl_divergence(p, q, nu) >= 0.0
        assert chi2_divergence(p, q, nu) >= 0.0


def test_kl_divergence_matches_direct_sum() -> None:
    p = SoftmaxPolicy.from_probs(np.array([[0.2, 0.8], [0.5, 0.5]]))
    q = SoftmaxPolicy.uniform(2, 2)
    nu = PromptDist(np.array([0.25, 0.75]))
    expected = 0.25 * (0.2 * math.log(0.4) + 0.8 * math.log(1.6))
    assert kl_divergence(p, q, nu) == pytest.approx(expected, rel=1e-12)


def test_two_point_divergences() -> None:
    p = SoftmaxPolicy.from_probs(np.array([[0.5, 0.5]]))
    q = SoftmaxPolicy.from_probs(np.array([[0.25, 0.75]]))
    nu = PromptDist.uniform(1)
    forward = kl_divergence(p, q, nu)
    assert forward == pytest.approx(0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0), rel=1e-12)
    assert forward == pytest.approx(0.143841, abs=1e-6)
    backward = kl_divergence(q, p, nu)
    assert backward == pytest.approx(0.25 * math.log(0.5) + 0.75 * math.log(1.5), rel=1e-12)
    assert abs(forward - backward) > 1e-3
    assert chi2_divergence(p, q, nu) == pytest.approx(1.0 / 6.0, rel=1e-12)


def test_softmax_shift_invariance() -> None:
    logits = np.random.default_rng(2).standard_normal((2, 3))
    shifted = logits + np.array([[5.0], [-3.0]])
    assert np.allclose(SoftmaxPolicy(logits).probs, SoftmaxPolicy(shifted).probs)
    centred = SoftmaxPolicy(shifted).centred()
    assert np.allclose(centred.logits.mean(axis=1), 0.0)


def test_policy_rejects_bad_input() -> None:
    with pytest.raises(DimensionError):
        SoftmaxPolicy(np.zeros(3))
    with pytest.raises(DomainError):
        SoftmaxPolicy(np.array([[0.0, np.inf]]))
    with pytest.raises(DomainError):
        SoftmaxPolicy.from_probs(np.array([[1.0, 0.0]]))


def test_prompt_dist_validation() -> None:
    with pytest.raises(DomainError):
        PromptDist(np.array([0.5, 0.6]))
    with pytest.raises(DomainError):
        PromptDist(np.array([1.5, -0.5]))
    assert PromptDist.uniform(4).num_prompts == 4


def test_reward_table_bounds_and_gaps() -> None:
    table = RewardTable(np.array([[0.0, 1.0, 2.0]]), 0.0, 2.0)
    gaps = table.gaps()
    assert gaps.shape == (1, 3, 3)
    assert gaps[0, 2, 0] == 2.0
    assert gaps[0, 0, 2] == -2.0
    with pytest.raises(DomainError):
        RewardTable(np.array([[0.0, 3.0]]), 0.0, 2.0)
    tight = RewardTable.tight(np.array([[-1.0, 1.0]]))
    assert (tight.r_min, tight.r_max) == (-1.0, 1.0)
