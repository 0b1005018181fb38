"""Closed-form quantities of KL-regularised alignment on tabular instances.

Optimal policies, regularised objectives, suboptimality gaps, concentrability,
rating-error metrics, the theoretical rate formulas (diagnostics only, big-O
constants set to 1) and the error-decomposition inequality.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Union

import numpy as np
from scipy import optimize

from .core import (
    KL,
    DivergenceKind,
    PromptDist,
    RewardTable,
    SoftmaxPolicy,
    chi2_divergence,
    kl_divergence,
    phi,
    phi_inverse,
)
from .errors import ArgumentError, DimensionError, NumericError
from .synth_env import Environment

RewardLike = Union[RewardTable, np.ndarray]
GapLike = Union[RewardTable, np.ndarray, Callable[[int, int, int], float]]

_SHIFT_XTOL = 1e-15
_SHIFT_MAXITER = 200


def _reward_values(r: RewardLike) -> np.ndarray:
    return r.values if isinstance(r, RewardTable) else np.asarray(r, dtype=float)


def chi2_shift(scores: np.ndarray, ref_probs: np.ndarray, kind: DivergenceKind) -> tuple[float, float]:
    """Solve ``Σ_a π_ref(a)·φ⁻¹(s_a − ζ) = 1`` for one prompt.

    The left side decreases in ζ and equals 1 at ``ζ = s_a − φ(1)`` when all
    scores agree, so ``[min s − γ, max s − γ]`` brackets the root. Returns
    ``(ζ, residual)``.
    """

    gamma = kind.gamma

    def excess(zeta: float) -> float:
        return math.fsum(ref_probs * phi_inverse(scores - zeta, kind)) - 1.0

    lo = float(scores.min()) - gamma
    hi = float(scores.max()) - gamma
    if hi - lo <= 0.0:
        return lo, excess(lo)
    try:
        zeta = optimize.brentq(excess, lo, hi, xtol=_SHIFT_XTOL, maxiter=_SHIFT_MAXITER)
    except (RuntimeError, ValueError) as exc:
        raise NumericError(f"normaliser root-find failed: {exc}") from exc
    return float(zeta), excess(zeta)


def optimal_policy(
    r: RewardLike,
    beta: float,
    ref: SoftmaxPolicy,
    nu: Optional[PromptDist] = None,
    kind: DivergenceKind = KL,
) -> SoftmaxPolicy:
    """Maximiser of ``⟨π, r⟩ − β·KL − β·γ·χ²`` against ``ref``.

    For KL this is the Gibbs policy ``π_ref·exp(r/β)/Z``; with γ > 0 it is
    ``π_ref·φ⁻¹(r/β − ζ(x))`` with the per-prompt shift from :func:`chi2_shift`.
    """

    if not beta > 0:
        raise ArgumentError(f"beta must be positive, got {beta}")
    values = _reward_values(r)
    if values.shape != ref.shape:
        raise DimensionError(f"reward shape {values.shape} does not match policy {ref.shape}")
    if nu is not None and nu.num_prompts != values.shape[0]:
        raise DimensionError("prompt distribution does not match the reward table")

    scores = values / beta
    if kind.gamma == 0.0:
        return SoftmaxPolicy(ref.log_probs + scores)

    ref_probs = ref.probs
    probs = np.empty_like(scores)
    for x in range(scores.shape[0]):
        zeta, _ = chi2_shift(scores[x], ref_probs[x], kind)
        probs[x] = ref_probs[x] * phi_inverse(scores[x] - zeta, kind)
    probs /= probs.sum(axis=1, keepdims=True)
    return SoftmaxPolicy(np.log(probs))


def implicit_reward(
    policy: SoftmaxPolicy, ref: SoftmaxPolicy, beta: float, kind: DivergenceKind = KL
) -> np.ndarray:
    """``β·φ(π/π_ref)``: the reward ``policy`` is optimal for, up to a per-prompt shift."""

    ratio = np.exp(policy.log_probs - ref.log_probs)
    return beta * np.asarray(phi(ratio, kind))


def objective_j_beta(
    policy: SoftmaxPolicy,
    r: RewardLike,
    beta: float,
    ref: SoftmaxPolicy,
    nu: PromptDist,
    kind: DivergenceKind = KL,
) -> float:
    """Regularised objective ``J_β(π; r)``."""

    values = _reward_values(r)
    if values.shape != policy.shape:
        raise DimensionError("reward and policy shapes differ")
    expected = math.fsum(nu.weights * (policy.probs * values).sum(axis=1))
    value = expected - beta * kl_divergence(policy, ref, nu)
    if kind.gamma > 0:
        value -= beta * kind.gamma * chi2_divergence(policy, ref, nu)
    return value


def suboptimality_gap(
    policy: SoftmaxPolicy, env: Environment, beta_eff: float, kind: DivergenceKind = KL
) -> float:
    """``J(π*; r*) − J(policy; r*)`` at regularisation ``beta_eff``."""

    best = optimal_policy(env.r_star, beta_eff, env.pi_ref, env.nu0, kind)
    return objective_j_beta(best, env.r_star, beta_eff, env.pi_ref, env.nu0, kind) - objective_j_beta(
        policy, env.r_star, beta_eff, env.pi_ref, env.nu0, kind
    )


def concentrability(pi: SoftmaxPolicy, env: Environment) -> float:
    """``C^π = Σ ν₀ Σ π·(π/π_data)``."""

    if pi.shape != env.shape:
        raise DimensionError("policy does not match the environment")
    ratio = np.exp(pi.log_probs - env.pi_data.log_probs)
    return math.fsum(env.nu0.weights * (pi.probs * ratio).sum(axis=1))


def c_star(env: Environment, beta_eff: float, kind: DivergenceKind = KL) -> float:
    return concentrability(optimal_policy(env.r_star, beta_eff, env.pi_ref, env.nu0, kind), env)


def c_max(policies: Iterable[SoftmaxPolicy], env: Environment) -> float:
    """Largest concentrability over a finite stand-in for the policy class."""

    values = [concentrability(pi, env) for pi in policies]
    if not values:
        raise ArgumentError("c_max needs at least one policy")
    return max(values)


def gap_array(gaps: GapLike, env: Environment) -> np.ndarray:
    """Normalise a reward table, a gap tensor or a gap function to ``g[x, a, b]``."""

    num_prompts, num_responses = env.shape
    if isinstance(gaps, RewardTable):
        return gaps.gaps()
    if callable(gaps):
        return np.array(
            [
                [[gaps(x, a, b) for b in range(num_responses)] for a in range(num_responses)]
                for x in range(num_prompts)
            ],
            dtype=float,
        )
    arr = np.asarray(gaps, dtype=float)
    if arr.shape == env.shape:
        return arr[:, :, None] - arr[:, None, :]
    if arr.shape == (num_prompts, num_responses, num_responses):
        return arr
    raise DimensionError(f"cannot read gaps of shape {arr.shape} for environment {env.shape}")


def err_rating(r_hat: GapLike, env: Environment) -> float:
    """``E_{x∼ν₀, a,a′∼π_data}[(Δ_{r*} − Δ_{r̂})²]``."""

    diff = env.r_star.gaps() - gap_array(r_hat, env)
    probs = env.pi_data.probs
    pair_mass = probs[:, :, None] * probs[:, None, :]
    return math.fsum(env.nu0.weights * (pair_mass * diff * diff).sum(axis=(1, 2)))


@dataclass(frozen=True)
class BoundParams:
    """Inputs of the rate formulas; ``c`` is the constant inside Err_DPO."""

    delta: float = 0.1
    policy_class_size: float = 100.0
    r_max: float = 2.0
    n: int = 1000
    c: float = 32.0

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ArgumentError(f"delta must lie in (0, 1), got {self.delta}")
        for name in ("policy_class_size", "r_max", "n", "c"):
            if not getattr(self, name) > 0:
                raise ArgumentError(f"{name} must be positive")

    @property
    def log_term(self) -> float:
        return math.log(self.policy_class_size / self.delta)


@dataclass(frozen=True)
class BoundReport:
    err_dpo: float
    rdpo_bound: float
    mlrdpo_bound: float
    beta1_theorem1: float


def err_dpo(params: BoundParams) -> float:
    """``c·R²_max·e^{4R_max}·log(|Π|/δ)/N``."""

    r = params.r_max
    return params.c * r * r * math.exp(4.0 * r) * params.log_term / params.n


def rate_bounds(
    params: BoundParams,
    err_rating_value: float,
    variance: float,
    c_conc: float,
    beta: float = 0.1,
) -> BoundReport:
    """Rate diagnostics for DPO, RDPO and ML-RDPO plus the prescribed β₁.

    ``beta1_theorem1`` is ``β·Err(r̂)/Err_DPO``; zero means full trust in the
    ratings and is left for the caller to clamp.
    """

    if err_rating_value < 0 or variance < 0 or c_conc < 0 or not beta > 0:
        raise ArgumentError("rate_bounds needs non-negative errors, variance and concentrability")
    base = err_dpo(params)
    r = params.r_max
    rdpo = math.sqrt(c_conc * min(base, err_rating_value))
    ml_scale = min(math.exp(r) * r * r, r * r + variance)
    mlrdpo = math.sqrt(c_conc * ml_scale * params.log_term / params.n)
    return BoundReport(
        err_dpo=base,
        rdpo_bound=rdpo,
        mlrdpo_bound=mlrdpo,
        beta1_theorem1=beta * err_rating_value / base,
    )


def mixing_alpha(err_rating_value: float, err_dpo_value: float) -> float:
    """Weight ``α = (1 + Err(r̂)/Err_DPO)⁻¹`` put on the ratings."""

    if not err_dpo_value > 0:
        raise ArgumentError("Err_DPO must be positive")
    return 1.0 / (1.0 + err_rating_value / err_dpo_value)


def gamma_prescription(
    err_dpo_value: float, err_rating_value: float, beta: float, c_star_value: float
) -> float:
    """χ² weight ``sqrt(Err_max / (β²(1−α)²C*))`` with ``Err_max = 2·min(Err_DPO, Err(r̂))``."""

    alpha = mixing_alpha(err_rating_value, err_dpo_value)
    if alpha >= 1.0:
        return 0.0
    err_max = 2.0 * min(err_dpo_value, err_rating_value)
    return math.sqrt(err_max / (beta * beta * (1.0 - alpha) ** 2 * c_star_value))


def hetero_rate_bound(
    params: BoundParams,
    variance: float,
    c_star_value: float,
    p_rat: float,
    p_rank: float,
    r_min: float = 0.0,
) -> float:
    """Rate of ML-RDPO when ratings and rankings are observed with probabilities."""

    if not (0.0 < p_rat <= 1.0 and 0.0 < p_rank <= 1.0):
        raise ArgumentError("observation probabilities must lie in (0, 1]")
    r = params.r_max
    rating_side = (2.0 * (r - r_min) ** 2 + 4.0 * variance) / p_rat
    ranking_side = 16.0 * math.exp(4.0 * r) * r * r / p_rank
    return math.sqrt(c_star_value * min(rating_side, ranking_side) * 2.0 * params.log_term / params.n)


@dataclass(frozen=True)
class DecompositionReport:
    holds: bool
    slack: float
    err_bar: float
    err_out: float
    err_hat: float
    alpha: float
    young_bound: float
    lemma_bound: float
    lemma_applicable: bool
    lemma_holds: Optional[bool]


def error_decomposition_check(
    env: Environment, r_out_gaps: GapLike, r_hat_gaps: GapLike, err_dpo_value: float
) -> DecompositionReport:
    """Check ``Err(r̄) ≤ 2(1−α)²Err(r_out) + 2α²Err(r̂)`` for ``r̄ = (1−α)r_out + αr̂``.

    The harmonic-mean bound ``2(Err_DPO⁻¹ + Err(r̂)⁻¹)⁻¹`` additionally needs
    ``Err(r_out) ≤ Err_DPO``; it is only reported when that holds.
    """

    if not err_dpo_value > 0:
        raise ArgumentError("Err_DPO must be positive")
    out = gap_array(r_out_gaps, env)
    hat = gap_array(r_hat_gaps, env)
    err_out = err_rating(out, env)
    err_hat = err_rating(hat, env)
    alpha = mixing_alpha(err_hat, err_dpo_value)
    err_bar = err_rating((1.0 - alpha) * out + alpha * hat, env)

    young = 2.0 * (1.0 - alpha) ** 2 * err_out + 2.0 * alpha * alpha * err_hat
    tolerance = 1e-12 * max(1.0, young)
    lemma = 0.0 if err_hat == 0.0 else 2.0 / (1.0 / err_dpo_value + 1.0 / err_hat)
    applicable = err_out <= err_dpo_value
    return DecompositionReport(
        holds=err_bar <= young + tolerance,
        slack=young - err_bar,
        err_bar=err_bar,
        err_out=err_out,
        err_hat=err_hat,
        alpha=alpha,
        young_bound=young,
        lemma_bound=lemma,
        lemma_applicable=applicable,
        lemma_holds=(err_bar <= lemma + tolerance) if applicable else None,
    )
