"""Ranking and rating alignment losses over tabular softmax policies.

Every loss is a weighted sum of per-pair terms ``ℓ(Δ, g)`` where ``Δ`` is the
(φ-generalised) log-ratio gap of the policy against π_ref and ``g`` the rating
gap. Gradients are exact: ``dℓ/dΔ`` is pushed through the softmax analytically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy import linalg, special

from .core import KL, DivergenceKind, RewardTable, SoftmaxPolicy
from .errors import ArgumentError, DataError, DimensionError, UnsupportedCombination
from .logger import get_logger
from .synth_env import Dataset, Environment, RatingModel


class Family(str, Enum):
    DPO = "DPO"
    IPO = "IPO"
    RDPO = "RDPO"
    RIPO = "RIPO"
    DDPO = "DDPO"
    MLRDPO = "MLRDPO"
    RPO = "RPO"
    RDPO_PENALIZED = "RDPO_PENALIZED"
    RDPO_HETERO = "RDPO_HETERO"
    MLRDPO_HETERO = "MLRDPO_HETERO"


RDPO_FAMILY = frozenset({Family.RDPO, Family.RIPO, Family.RDPO_PENALIZED, Family.RDPO_HETERO})
NEEDS_RATINGS = frozenset(
    {Family.RDPO, Family.RIPO, Family.DDPO, Family.RPO, Family.RDPO_PENALIZED}
)
HETERO_FAMILIES = frozenset({Family.RDPO_HETERO, Family.MLRDPO_HETERO})
# Per-pair terms that stay closed form when zero-mean Gaussian noise on g is
# integrated out (polynomial of degree <= 2 in g).
_GAUSSIAN_EXPECTABLE = frozenset(
    {Family.DPO, Family.IPO, Family.RIPO, Family.DDPO, Family.MLRDPO, Family.MLRDPO_HETERO}
)


@dataclass(frozen=True)
class AlgorithmSpec:
    """Loss family plus hyperparameters.

    ``beta1`` weighs rating trust for the RDPO family, ``variance`` is 𝕍 of
    ML-RDPO, ``lambda1``/``lambda2``/``delta_max`` shape the interval penalty.
    """

    family: Family
    beta: float = 0.1
    beta1: float = 0.1
    variance: float = 0.01
    divergence: DivergenceKind = KL
    lambda1: float = 0.0
    lambda2: float = 0.0
    delta_max: float = 2.0
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", Family(self.family))
        _positive("beta", self.beta)
        _positive("beta1", self.beta1)
        _positive("delta_max", self.delta_max)
        if self.family is Family.MLRDPO:
            _positive("variance", self.variance)
        elif not math.isfinite(self.variance) or self.variance < 0:
            raise ArgumentError(f"variance must be >= 0, got {self.variance}")
        for field_name in ("lambda1", "lambda2"):
            value = getattr(self, field_name)
            if not math.isfinite(value) or value < 0:
                raise ArgumentError(f"{field_name} must be >= 0, got {value}")

    @property
    def label(self) -> str:
        return self.name or self.family.value

    @property
    def rating_weight(self) -> float:
        """β/β₁, the trust placed on the rating gap."""

        return self.beta / self.beta1

    @property
    def beta_eff(self) -> float:
        """Regularisation of the objective the family optimises."""

        if self.family in RDPO_FAMILY:
            return self.beta * self.beta1 / (self.beta + self.beta1)
        return self.beta

    def with_overrides(self, **changes: object) -> "AlgorithmSpec":
        return replace(self, **changes)


def _positive(name: str, value: float) -> None:
    if not math.isfinite(value) or value <= 0:
        raise ArgumentError(f"{name} must be positive, got {value}")


def from_mixture(
    beta_prime: float, alpha: float, family: Family = Family.RDPO, **extra: object
) -> AlgorithmSpec:
    """Spec for the ``(β', α)`` parameterisation: β = β'/(1−α), β₁ = β'/α."""

    _positive("beta_prime", beta_prime)
    if not 0.0 < alpha < 1.0:
        raise ArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    return AlgorithmSpec(
        family, beta=beta_prime / (1.0 - alpha), beta1=beta_prime / alpha, **extra  # type: ignore[arg-type]
    )


@dataclass(frozen=True, eq=False)
class PairBatch:
    """Weighted comparison rows; ``gaps`` is NaN where no rating exists.

    ``has_rank`` is False for rating-only rows of a heterogeneous objective and
    ``gap_noise`` is the variance of zero-mean noise integrated out of ``g``.
    """

    prompts: np.ndarray
    chosen: np.ndarray
    rejected: np.ndarray
    gaps: np.ndarray
    weights: np.ndarray
    has_rank: np.ndarray
    gap_noise: float = 0.0

    @classmethod
    def from_dataset(cls, ds: Dataset, *, rank: bool = True) -> "PairBatch":
        n = len(ds)
        return cls(
            ds.prompts,
            ds.chosen,
            ds.rejected,
            ds.rating_gaps,
            np.ones(n),
            np.full(n, rank),
        )

    def concat(self, other: "PairBatch") -> "PairBatch":
        return PairBatch(
            np.concatenate([self.prompts, other.prompts]),
            np.concatenate([self.chosen, other.chosen]),
            np.concatenate([self.rejected, other.rejected]),
            np.concatenate([self.gaps, other.gaps]),
            np.concatenate([self.weights, other.weights]),
            np.concatenate([self.has_rank, other.has_rank]),
            self.gap_noise,
        )


def _ratio_tables(
    policy: SoftmaxPolicy, ref: SoftmaxPolicy, kind: DivergenceKind
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``φ(π/π_ref)`` and ``φ'(ρ)·ρ = γρ + 1`` per (prompt, response)."""

    log_ratio = policy.log_probs - ref.log_probs
    gamma = kind.gamma
    if gamma == 0.0:
        return log_ratio, np.ones_like(log_ratio)
    ratio = np.exp(log_ratio)
    return gamma * ratio + log_ratio, gamma * ratio + 1.0


def delta_theta(
    policy: SoftmaxPolicy,
    ref: SoftmaxPolicy,
    x: int,
    a: int,
    b: int,
    kind: DivergenceKind = KL,
) -> float:
    """``φ(π/π_ref)(x, a) − φ(π/π_ref)(x, b)``; plain log-ratio gap for KL."""

    if policy.shape != ref.shape:
        raise DimensionError("policy and reference shapes differ")
    num_prompts, num_responses = policy.shape
    if not (0 <= x < num_prompts and 0 <= a < num_responses and 0 <= b < num_responses):
        raise DimensionError(f"index ({x}, {a}, {b}) out of range for {policy.shape}")
    table, _ = _ratio_tables(policy, ref, kind)
    return float(table[x, a] - table[x, b])


def margins(
    policy: SoftmaxPolicy, ref: SoftmaxPolicy, ds: Dataset, kind: DivergenceKind = KL
) -> np.ndarray:
    """Vector of ``Δ_θ`` over the examples of ``ds``."""

    table, _ = _ratio_tables(policy, ref, kind)
    return table[ds.prompts, ds.chosen] - table[ds.prompts, ds.rejected]


def _pair_terms(
    spec: AlgorithmSpec, delta: np.ndarray, batch: PairBatch
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row loss values and their derivatives with respect to ``Δ``."""

    family = spec.family
    beta = spec.beta
    k = spec.rating_weight
    noise = batch.gap_noise
    rated = ~np.isnan(batch.gaps)
    g = np.where(rated, batch.gaps, 0.0)

    if family is Family.DPO:
        t = beta * delta
        return -special.log_expit(t), -beta * special.expit(-t)

    if family is Family.IPO:
        m = delta - 1.0 / (2.0 * beta)
        return m * m, 2.0 * m

    if family in (Family.RDPO, Family.RDPO_HETERO, Family.RDPO_PENALIZED):
        u = beta * delta - k * g
        values = -special.log_expit(u)
        slopes = -beta * special.expit(-u)
        if family is Family.RDPO_PENALIZED:
            w = delta - g / spec.beta1
            upper = w - spec.delta_max
            lower = -w - spec.delta_max
            values = values + spec.lambda1 * np.maximum(upper, 0.0)
            values = values + spec.lambda2 * np.maximum(lower, 0.0)
            slopes = slopes + spec.lambda1 * (upper > 0) - spec.lambda2 * (lower > 0)
        return values, slopes

    if family is Family.RIPO:
        u = beta * delta - k * g - 0.5
        return u * u + k * k * noise, 2.0 * beta * u

    if family is Family.DDPO:
        e = g - beta * delta
        return e * e + noise, -2.0 * beta * e

    if family is Family.RPO:
        u = delta
        log_p, log_q = special.log_expit(u), special.log_expit(g)
        log_not_p, log_not_q = special.log_expit(-u), special.log_expit(-g)
        p = special.expit(u)
        values = p * (log_p - log_q) + (1.0 - p) * (log_not_p - log_not_q)
        slopes = p * special.expit(-u) * (u - g)
        return values, slopes

    if family in (Family.MLRDPO, Family.MLRDPO_HETERO):
        t = beta * delta
        rank = batch.has_rank
        e = g - t
        scale = 1.0 / (2.0 * spec.variance) if family is Family.MLRDPO else 1.0
        values = np.where(rank, -special.log_expit(t), 0.0)
        values = values + np.where(rated, scale * (e * e + noise), 0.0)
        slopes = np.where(rank, -beta * special.expit(-t), 0.0)
        slopes = slopes + np.where(rated, -2.0 * beta * scale * e, 0.0)
        return values, slopes

    raise ArgumentError(f"unknown loss family {family!r}")  # pragma: no cover


class Objective:
    """A loss bound to an environment and a fixed set of weighted pairs."""

    def __init__(self, spec: AlgorithmSpec, env: Environment, batch: PairBatch, size: int) -> None:
        if batch.gap_noise > 0 and spec.family not in _GAUSSIAN_EXPECTABLE:
            raise UnsupportedCombination(
                f"{spec.family.value} has no closed-form expectation under Gaussian ratings"
            )
        if spec.family in NEEDS_RATINGS and np.isnan(batch.gaps).any():
            raise DataError(f"missing rating: {spec.family.value} needs a rating gap on every example")
        self.spec = spec
        self.env = env
        self.batch = batch
        self.size = size

    @classmethod
    def empirical(cls, spec: AlgorithmSpec, env: Environment, ds: Dataset) -> "Objective":
        ds.validate(env.num_prompts, env.num_responses)
        if spec.family in HETERO_FAMILIES:
            obj = cls.hetero(spec, env, ds.strip_ratings(), ds.rated())
            obj.size = len(ds)
            return obj
        return cls(spec, env, PairBatch.from_dataset(ds), len(ds))

    @classmethod
    def hetero(
        cls, spec: AlgorithmSpec, env: Environment, ds_rank: Dataset, ds_rated: Dataset
    ) -> "Objective":
        if spec.family not in HETERO_FAMILIES:
            raise ArgumentError(f"{spec.family.value} is not a heterogeneous-data family")
        ds_rank.validate(env.num_prompts, env.num_responses)
        ds_rated.validate(env.num_prompts, env.num_responses)
        size = len(ds_rank) + len(ds_rated)
        if spec.family is Family.RDPO_HETERO:
            table = fit_rating_lsq(ds_rated, env).values
            fitted = table[ds_rank.prompts, ds_rank.chosen] - table[ds_rank.prompts, ds_rank.rejected]
            return cls(spec, env, PairBatch.from_dataset(ds_rank.with_gaps(fitted)), size)
        rank_rows = PairBatch.from_dataset(ds_rank.strip_ratings())
        rating_rows = PairBatch.from_dataset(ds_rated.rated(), rank=False)
        return cls(spec, env, rank_rows.concat(rating_rows), size)

    @classmethod
    def population(cls, spec: AlgorithmSpec, env: Environment, rating: RatingModel) -> "Objective":
        if spec.family in HETERO_FAMILIES:
            raise UnsupportedCombination(
                f"{spec.family.value} has no population form over a single rating law"
            )
        return cls(spec, env, population_batch(env, rating), 1)

    def value(self, policy: SoftmaxPolicy) -> float:
        return self.value_and_grad(policy, need_grad=False)[0]

    def gradient(self, policy: SoftmaxPolicy) -> np.ndarray:
        grad = self.value_and_grad(policy)[1]
        assert grad is not None
        return grad

    def value_and_grad(
        self, policy: SoftmaxPolicy, need_grad: bool = True
    ) -> tuple[float, Optional[np.ndarray]]:
        if policy.shape != self.env.shape:
            raise DimensionError(f"policy shape {policy.shape} does not match {self.env.shape}")
        batch = self.batch
        phi_table, dphi = _ratio_tables(policy, self.env.pi_ref, self.spec.divergence)
        x, c, r = batch.prompts, batch.chosen, batch.rejected
        delta = phi_table[x, c] - phi_table[x, r]
        values, slopes = _pair_terms(self.spec, delta, batch)
        total = math.fsum(batch.weights * values)
        if not need_grad:
            return total, None

        coeff = batch.weights * slopes
        w_chosen = coeff * dphi[x, c]
        w_rejected = coeff * dphi[x, r]
        grad = np.zeros(policy.shape)
        np.add.at(grad, (x, c), w_chosen)
        np.add.at(grad, (x, r), -w_rejected)
        per_prompt = np.bincount(x, weights=w_chosen - w_rejected, minlength=policy.shape[0])
        grad -= per_prompt[:, None] * policy.probs
        return total, grad


def population_batch(env: Environment, rating: RatingModel) -> PairBatch:
    """Every ``(x, chosen, rejected)`` with its probability under ν₀ × π_data² × BT."""

    num_prompts, num_responses = env.shape
    xs, first, second = np.meshgrid(
        np.arange(num_prompts), np.arange(num_responses), np.arange(num_responses), indexing="ij"
    )
    xs, first, second = xs.ravel(), first.ravel(), second.ravel()
    probs = env.pi_data.probs
    draw = env.nu0.weights[xs] * probs[xs, first] * probs[xs, second]
    reward = env.r_star.values
    win = special.expit(reward[xs, first] - reward[xs, second])

    prompts = np.concatenate([xs, xs])
    chosen = np.concatenate([first, second])
    rejected = np.concatenate([second, first])
    weights = np.concatenate([draw * win, draw * (1.0 - win)])
    mean = rating.mean_table(env)
    gaps = mean[prompts, chosen] - mean[prompts, rejected]
    keep = weights > 0
    return PairBatch(
        prompts[keep],
        chosen[keep],
        rejected[keep],
        gaps[keep],
        weights[keep],
        np.ones(int(keep.sum()), dtype=bool),
        rating.noise_variance,
    )


def loss(spec: AlgorithmSpec, policy: SoftmaxPolicy, env: Environment, ds: Dataset) -> float:
    """Summed loss of ``spec`` over ``ds``."""

    return Objective.empirical(spec, env, ds).value(policy)


def grad_loss(spec: AlgorithmSpec, policy: SoftmaxPolicy, env: Environment, ds: Dataset) -> np.ndarray:
    """Exact gradient of :func:`loss` with respect to the policy logits."""

    return Objective.empirical(spec, env, ds).gradient(policy)


def loss_hetero(
    spec: AlgorithmSpec,
    policy: SoftmaxPolicy,
    env: Environment,
    ds_rank: Dataset,
    ds_rated: Dataset,
) -> float:
    """Loss of a heterogeneous family over separate ranking and rating sets."""

    return Objective.hetero(spec, env, ds_rank, ds_rated).value(policy)


def grad_loss_hetero(
    spec: AlgorithmSpec,
    policy: SoftmaxPolicy,
    env: Environment,
    ds_rank: Dataset,
    ds_rated: Dataset,
) -> np.ndarray:
    return Objective.hetero(spec, env, ds_rank, ds_rated).gradient(policy)


def population_loss(
    spec: AlgorithmSpec, policy: SoftmaxPolicy, env: Environment, rating: RatingModel
) -> float:
    """Exact expected per-example loss under the data-generating law."""

    return Objective.population(spec, env, rating).value(policy)


def population_grad(
    spec: AlgorithmSpec, policy: SoftmaxPolicy, env: Environment, rating: RatingModel
) -> np.ndarray:
    return Objective.population(spec, env, rating).gradient(policy)


def fit_rating_lsq(ds_rated: Dataset, env: Environment) -> RewardTable:
    """Least-squares tabular reward from observed rating gaps.

    Only gaps are identified: the minimum-norm solution is taken and then
    centred per prompt.
    """

    rated = ds_rated.rated()
    if len(rated) == 0:
        raise DataError("least-squares rating fit needs at least one rated example")
    rated.validate(env.num_prompts, env.num_responses)
    num_prompts, num_responses = env.shape
    x, c, r, g = rated.prompts, rated.chosen, rated.rejected, rated.rating_gaps

    normal = np.zeros((num_prompts, num_responses, num_responses))
    np.add.at(normal, (x, c, c), 1.0)
    np.add.at(normal, (x, r, r), 1.0)
    np.add.at(normal, (x, c, r), -1.0)
    np.add.at(normal, (x, r, c), -1.0)
    rhs = np.zeros((num_prompts, num_responses))
    np.add.at(rhs, (x, c), g)
    np.add.at(rhs, (x, r), -g)

    values = np.zeros((num_prompts, num_responses))
    for prompt in np.unique(x):
        solution, *_ = linalg.lstsq(normal[prompt], rhs[prompt])
        values[prompt] = solution
    values -= values.mean(axis=1, keepdims=True)
    get_logger("data").debug("Fitted rating table from %d gaps", len(rated))
    return RewardTable.tight(values)
