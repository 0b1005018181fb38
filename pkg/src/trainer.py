"""Full-batch gradient descent over tabular policy logits, plus the gradient checker."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Union

import numpy as np

from .core import KL, SoftmaxPolicy, kl_divergence
from .errors import ArgumentError, DimensionError, TrainingAborted
from .logger import get_logger
from .losses import AlgorithmSpec, Family, Objective
from .oracle import objective_j_beta, optimal_policy
from .synth_env import Dataset, Environment, RatingModel, Seed, make_rng

TrainData = Union[Dataset, RatingModel, tuple[Dataset, Dataset]]

TRACE_HEADER = ("step", "loss", "grad_norm", "subopt_gap", "kl_to_ref")


class TrainMode(str, Enum):
    EMPIRICAL = "EMPIRICAL"
    POPULATION = "POPULATION"


class TrainInit(str, Enum):
    FROM_REF = "FROM_REF"
    FROM_LOGITS = "FROM_LOGITS"
    RANDOM = "RANDOM"


@dataclass(frozen=True, eq=False)
class TrainConfig:
    learning_rate: float = 0.1
    steps: int = 2000
    seed: int = 0
    mode: TrainMode = TrainMode.EMPIRICAL
    log_every: int = 100
    init: TrainInit = TrainInit.FROM_REF
    init_logits: Optional[np.ndarray] = None
    grad_clip: Optional[float] = None
    tol: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", TrainMode(self.mode))
        object.__setattr__(self, "init", TrainInit(self.init))
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ArgumentError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps}")
        if self.log_every < 1:
            raise ArgumentError(f"log_every must be >= 1, got {self.log_every}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ArgumentError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.tol < 0:
            raise ArgumentError(f"tol must be >= 0, got {self.tol}")
        if self.init is TrainInit.FROM_LOGITS and self.init_logits is None:
            raise ArgumentError("FROM_LOGITS initialisation needs init_logits")


@dataclass(frozen=True)
class TraceRecord:
    step: int
    loss: float
    grad_norm: float
    subopt_gap: float
    kl_to_ref: float

    def as_row(self) -> tuple[int, float, float, float, float]:
        return (self.step, self.loss, self.grad_norm, self.subopt_gap, self.kl_to_ref)


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def append(self, record: TraceRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ArgumentError("trace steps must increase strictly")
        self.records.append(record)

    @property
    def initial(self) -> TraceRecord:
        return self.records[0]

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]

    def __len__(self) -> int:
        return len(self.records)


def build_objective(spec: AlgorithmSpec, env: Environment, data: TrainData, mode: TrainMode) -> Objective:
    if mode is TrainMode.POPULATION:
        if not isinstance(data, RatingModel):
            raise ArgumentError("POPULATION mode trains against a rating model, not a dataset")
        return Objective.population(spec, env, data)
    if isinstance(data, RatingModel):
        raise ArgumentError("EMPIRICAL mode needs a dataset")
    if isinstance(data, tuple):
        ds_rank, ds_rated = data
        return Objective.hetero(spec, env, ds_rank, ds_rated)
    if len(data) == 0:
        raise ArgumentError("cannot train on an empty dataset")
    return Objective.empirical(spec, env, data)


def _initial_logits(env: Environment, cfg: TrainConfig) -> np.ndarray:
    if cfg.init is TrainInit.FROM_REF:
        return np.array(env.pi_ref.logits)
    if cfg.init is TrainInit.FROM_LOGITS:
        logits = np.array(cfg.init_logits, dtype=float)
        if logits.shape != env.shape:
            raise DimensionError(f"init_logits shape {logits.shape} does not match {env.shape}")
        return logits
    return make_rng(cfg.seed).standard_normal(env.shape)


class _GapMeter:
    """Suboptimality gap and KL to π_ref with the optimum computed once."""

    def __init__(self, env: Environment, beta_eff: float) -> None:
        self.env = env
        self.beta_eff = beta_eff
        best = optimal_policy(env.r_star, beta_eff, env.pi_ref, env.nu0, KL)
        self.best_value = objective_j_beta(best, env.r_star, beta_eff, env.pi_ref, env.nu0, KL)

    def __call__(self, policy: SoftmaxPolicy) -> tuple[float, float]:
        env = self.env
        value = objective_j_beta(policy, env.r_star, self.beta_eff, env.pi_ref, env.nu0, KL)
        return self.best_value - value, kl_divergence(policy, env.pi_ref, env.nu0)


def train(
    spec: AlgorithmSpec, env: Environment, data: TrainData, cfg: TrainConfig
) -> tuple[SoftmaxPolicy, TrainTrace]:
    """Full-batch gradient descent on the mean loss over the policy logits.

    Logits are re-centred per prompt after every update. Records are taken at
    step 0, every ``log_every`` steps and at the last evaluated step; the
    last record is also where an early stop on ``tol`` lands.
    """

    logger = get_logger("trainer")
    objective = build_objective(spec, env, data, cfg.mode)
    scale = 1.0 / objective.size
    meter = _GapMeter(env, spec.beta_eff)
    trace = TrainTrace(
        metadata={
            "algorithm": spec.label,
            "family": spec.family.value,
            "mode": cfg.mode.value,
            "beta_eff": spec.beta_eff,
            "learning_rate": cfg.learning_rate,
            "interval_constraint": "penalty" if spec.family is Family.RDPO_PENALIZED else "none",
        }
    )

    logits = _initial_logits(env, cfg)
    policy = SoftmaxPolicy(logits)
    converged = False
    step = 0
    while True:
        value, grad = objective.value_and_grad(policy)
        assert grad is not None
        value *= scale
        grad = grad * scale
        grad_norm = float(np.linalg.norm(grad))
        if not (math.isfinite(value) and math.isfinite(grad_norm)):
            raise TrainingAborted(step, f"non-finite loss or gradient (loss={value!r})")

        converged = cfg.tol > 0 and grad_norm <= cfg.tol
        last = converged or step == cfg.steps
        if step == 0 or step % cfg.log_every == 0 or last:
            gap, kl_ref = meter(policy)
            trace.append(TraceRecord(step, value, grad_norm, gap, kl_ref))
            logger.debug(
                "%s step %d loss=%.6g grad=%.3g gap=%.6g", spec.label, step, value, grad_norm, gap
            )
        if last:
            break

        if cfg.grad_clip is not None and grad_norm > cfg.grad_clip:
            grad = grad * (cfg.grad_clip / grad_norm)
        logits = logits - cfg.learning_rate * grad
        logits = logits - logits.mean(axis=1, keepdims=True)
        try:
            policy = SoftmaxPolicy(logits)
        except ValueError as exc:
            raise TrainingAborted(step + 1, str(exc)) from exc
        step += 1

    trace.metadata["steps_run"] = step
    trace.metadata["converged"] = converged
    loss_increased = trace.final.loss > trace.initial.loss
    trace.metadata["loss_increased"] = loss_increased
    if loss_increased:
        logger.warning(
            "%s: final loss %.6g exceeds initial loss %.6g",
            spec.label,
            trace.final.loss,
            trace.initial.loss,
        )
    logger.info(
        "Trained %s for %d steps: loss %.6g -> %.6g, gap %.6g",
        spec.label,
        step,
        trace.initial.loss,
        trace.final.loss,
        trace.final.subopt_gap,
    )
    return policy, trace


def finite_diff_gradcheck(
    spec: AlgorithmSpec,
    policy: SoftmaxPolicy,
    env: Environment,
    ds: TrainData,
    step: float = 1e-5,
    max_coords: int = 200,
    seed: Seed = 0,
) -> float:
    """Largest relative error between central differences and the analytic gradient.

    Works on the mean loss. The denominator is floored at
    ``max(1e-8, 1e-3·max|∇|)`` so coordinates whose gradient is pure
    cancellation do not report round-off as error.
    """

    if not 0.0 < step <= 1e-2:
        raise ArgumentError(f"finite-difference step must lie in (0, 1e-2], got {step}")
    mode = TrainMode.POPULATION if isinstance(ds, RatingModel) else TrainMode.EMPIRICAL
    objective = build_objective(spec, env, ds, mode)
    scale = 1.0 / objective.size
    analytic = objective.gradient(policy) * scale

    total = analytic.size
    if total <= max_coords:
        coords = np.arange(total)
    else:
        coords = np.sort(make_rng(seed).choice(total, size=max_coords, replace=False))

    base = np.array(policy.logits)
    floor = max(1e-8, 1e-3 * float(np.abs(analytic).max()))
    worst = 0.0
    for flat in coords:
        index = np.unravel_index(int(flat), base.shape)
        plus = base.copy()
        plus[index] += step
        minus = base.copy()
        minus[index] -= step
        numeric = (
            objective.value(SoftmaxPolicy(plus)) - objective.value(SoftmaxPolicy(minus))
        ) * scale / (2.0 * step)
        exact = float(analytic[index])
        error = abs(numeric - exact) / max(abs(numeric), abs(exact), floor)
        worst = max(worst, error)
    get_logger("trainer").debug(
        "Gradient check for %s over %d coordinates: %.3g", spec.label, len(coords), worst
    )
    return worst
