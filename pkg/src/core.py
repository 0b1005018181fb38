"""Numerically stable primitives and the probability vocabulary of the lab.

Policies are dense ``(num_prompts, num_responses)`` tables. Every function in
this module is pure and deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Union

import numpy as np
from scipy import special

from .errors import DimensionError, DomainError, NumericError

ArrayLike = Union[float, np.ndarray]

_WEIGHT_TOL = 1e-12
_PHI_TOL = 1e-12
_PHI_MAX_ITER = 200


@dataclass(frozen=True, eq=False)
class PromptDist:
    """Prompt distribution ν₀ over prompt indices."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=float)
        if weights.ndim != 1 or weights.size == 0:
            raise DimensionError("prompt weights must be a non-empty vector")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise DomainError("prompt weights must be finite and non-negative")
        if abs(math.fsum(weights) - 1.0) > _WEIGHT_TOL:
            raise DomainError(f"prompt weights sum to {math.fsum(weights)!r}, expected 1")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, num_prompts: int) -> "PromptDist":
        return cls(np.full(num_prompts, 1.0 / num_prompts))

    @classmethod
    def from_unnormalised(cls, masses: np.ndarray) -> "PromptDist":
        masses = np.asarray(masses, dtype=float)
        return cls(masses / math.fsum(masses))

    @property
    def num_prompts(self) -> int:
        return int(self.weights.size)


@dataclass(frozen=True, eq=False)
class RewardTable:
    """Bounded dense reward ``values[x, a]``.

    Bounds are inclusive. The latent reward additionally satisfies
    ``0 <= r_min`` (checked by :class:`~src.synth_env.Environment`); fitted
    rating tables are centred per prompt and may be negative.
    """

    values: np.ndarray
    r_min: float
    r_max: float

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise DimensionError("reward table must be two dimensional")
        if not np.all(np.isfinite(values)):
            raise DomainError("reward table contains non-finite values")
        if self.r_min > self.r_max:
            raise DomainError(f"r_min={self.r_min} exceeds r_max={self.r_max}")
        if values.min() < self.r_min or values.max() > self.r_max:
            raise DomainError("reward values fall outside [r_min, r_max]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "r_min", float(self.r_min))
        object.__setattr__(self, "r_max", float(self.r_max))

    @classmethod
    def tight(cls, values: np.ndarray) -> "RewardTable":
        """Wrap ``values`` with bounds equal to their range."""

        values = np.asarray(values, dtype=float)
        return cls(values, float(values.min()), float(values.max()))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def gaps(self) -> np.ndarray:
        """Return ``g[x, a, b] = r(x, a) - r(x, b)``."""

        return self.values[:, :, None] - self.values[:, None, :]


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy:
    """Tabular policy ``π(a|x) = softmax(logits[x])[a]``."""

    logits: np.ndarray
    _log_probs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        logits = np.array(self.logits, dtype=float)
        if logits.ndim != 2:
            raise DimensionError("policy logits must be two dimensional")
        if not np.all(np.isfinite(logits)):
            raise DomainError("policy logits must be finite")
        logits.setflags(write=False)
        log_probs = special.log_softmax(logits, axis=1)
        log_probs.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "_log_probs", log_probs)

    @classmethod
    def uniform(cls, num_prompts: int, num_responses: int) -> "SoftmaxPolicy":
        return cls(np.zeros((num_prompts, num_responses)))

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "SoftmaxPolicy":
        probs = np.asarray(probs, dtype=float)
        if np.any(probs <= 0):
            raise DomainError("softmax policies need strictly positive probabilities")
        return cls(np.log(probs))

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape  # type: ignore[return-value]

    @property
    def log_probs(self) -> np.ndarray:
        return self._log_probs

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self._log_probs)

    def centred(self) -> "SoftmaxPolicy":
        """Same policy with per-prompt zero-mean logits."""

        return SoftmaxPolicy(self.logits - self.logits.mean(axis=1, keepdims=True))


class DivergenceTag(str, Enum):
    KL = "KL"
    CHI2 = "CHI2"
    KL_PLUS_GAMMA_CHI2 = "KL_PLUS_GAMMA_CHI2"


@dataclass(frozen=True)
class DivergenceKind:
    """Regulariser choice: KL, KL+χ² (γ=1) or KL+γ·χ².

    The associated link is ``φ(x) = γ x + log x``.
    """

    tag: DivergenceTag = DivergenceTag.KL
    gamma_value: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tag", DivergenceTag(self.tag))
        if not math.isfinite(self.gamma_value) or self.gamma_value < 0:
            raise DomainError(f"gamma must be finite and non-negative, got {self.gamma_value}")

    @classmethod
    def kl(cls) -> "DivergenceKind":
        return cls(DivergenceTag.KL)

    @classmethod
    def chi2(cls) -> "DivergenceKind":
        return cls(DivergenceTag.CHI2)

    @classmethod
    def mixed(cls, gamma: float) -> "DivergenceKind":
        return cls(DivergenceTag.KL_PLUS_GAMMA_CHI2, float(gamma))

    @property
    def gamma(self) -> float:
        if self.tag is DivergenceTag.KL:
            return 0.0
        if self.tag is DivergenceTag.CHI2:
            return 1.0
        return self.gamma_value


KL = DivergenceKind.kl()


def _require_finite(t: ArrayLike) -> np.ndarray:
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("argument must be finite")
    return arr


def _unwrap(value: np.ndarray) -> ArrayLike:
    return float(value) if value.ndim == 0 else value


def sigmoid(t: ArrayLike) -> ArrayLike:
    """Logistic function ``1 / (1 + e^{-t})``."""

    return _unwrap(special.expit(_require_finite(t)))


def log_sigmoid(t: ArrayLike) -> ArrayLike:
    """``log σ(t)`` without overflow for large ``|t|``."""

    return _unwrap(special.log_expit(_require_finite(t)))


def _check_pair(p: SoftmaxPolicy, q: SoftmaxPolicy, nu: PromptDist) -> None:
    if p.shape != q.shape:
        raise DimensionError(f"policy shapes differ: {p.shape} vs {q.shape}")
    if p.shape[0] != nu.num_prompts:
        raise DimensionError(
            f"policies cover {p.shape[0]} prompts, distribution has {nu.num_prompts}"
        )


def kl_divergence(p: SoftmaxPolicy, q: SoftmaxPolicy, nu: PromptDist) -> float:
    """ν₀-averaged ``KL(p || q)``; ``0·log(0/q)`` counts as 0."""

    _check_pair(p, q, nu)
    per_prompt = special.rel_entr(p.probs, q.probs).sum(axis=1)
    return max(0.0, math.fsum(nu.weights * per_prompt))


def chi2_divergence(p: SoftmaxPolicy, q: SoftmaxPolicy, nu: PromptDist) -> float:
    """ν₀-averaged ``½(Σ p²/q − 1)``."""

    _check_pair(p, q, nu)
    p_probs = p.probs
    second_moment = (p_probs * np.exp(p.log_probs - q.log_probs)).sum(axis=1)
    return max(0.0, 0.5 * (math.fsum(nu.weights * second_moment) - 1.0))


def phi(x: ArrayLike, kind: DivergenceKind = KL) -> ArrayLike:
    """Link ``φ(x) = γx + log x`` of the regulariser ``kind``."""

    arr = _require_finite(x)
    if np.any(arr <= 0):
        raise DomainError("phi is defined for positive arguments only")
    return _unwrap(kind.gamma * arr + np.log(arr))


def phi_inverse(v: ArrayLike, kind: DivergenceKind = KL) -> ArrayLike:
    """Exact inverse of :func:`phi`.

    For γ > 0 the root of ``γ e^y + y = v`` is found in ``y = log x`` by Newton
    steps kept inside the bracket ``[min(v − γ, 0), v]``; a step leaving the
    bracket is replaced by bisection.
    """

    values = _require_finite(v)
    gamma = kind.gamma
    if gamma == 0.0:
        return _unwrap(np.exp(values))

    lo = np.minimum(values - gamma, 0.0)
    hi = values.copy()
    # exp(v) solves the γ = 0 problem; clamp it into the bracket
    y = np.clip(np.where(values < 0, values, np.log1p(np.maximum(values, 0.0) / (1.0 + gamma))), lo, hi)
    # 1e-12 absolute, or a few ulps of v once v itself is that coarse
    tol = np.maximum(_PHI_TOL, 8.0 * np.spacing(np.abs(values)))
    for _ in range(_PHI_MAX_ITER):
        ey = np.exp(y)
        residual = gamma * ey + y - values
        done = np.abs(residual) <= tol
        if np.all(done):
            return _unwrap(np.exp(y))
        hi = np.where(residual > 0, y, hi)
        lo = np.where(residual < 0, y, lo)
        step = y - residual / (gamma * ey + 1.0)
        outside = (step <= lo) | (step >= hi)
        step = np.where(outside, 0.5 * (lo + hi), step)
        y = np.where(done, y, step)
    raise NumericError(f"phi_inverse did not converge in {_PHI_MAX_ITER} iterations")
