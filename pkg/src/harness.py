"""Command implementations and multi-seed sweep orchestration."""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import yaml

from .core import SoftmaxPolicy, kl_divergence
from .errors import ArgumentError, SchemaError
from .logger import get_logger
from .losses import HETERO_FAMILIES, RDPO_FAMILY, AlgorithmSpec, Family, Objective
from .oracle import (
    BoundParams,
    c_max,
    c_star,
    concentrability,
    gamma_prescription,
    hetero_rate_bound,
    mixing_alpha,
    optimal_policy,
    rate_bounds,
    suboptimality_gap,
)
from .resource_monitor import current_rss
from .serialization import (
    load_dataset,
    load_environment,
    load_policy,
    save_dataset,
    save_environment,
    save_policy,
    spec_from_dict,
    spec_to_dict,
    write_csv,
    write_json,
    write_trace_csv,
)
from .synth_env import (
    CorruptionSpec,
    Dataset,
    EnvSpec,
    Environment,
    RatingMode,
    RatingModel,
    derive_seed,
    empirical_err_rating,
    make_environment,
    make_rng,
    mask_ratings,
    sample_dataset,
)
from .trainer import TrainConfig, TrainMode, finite_diff_gradcheck, train

GRADCHECK_THRESHOLD = 1e-4
KINK_GRADCHECK_THRESHOLD = 1e-3

SWEEP_HEADER = (
    "point_index",
    "point",
    "algorithm",
    "family",
    "seed",
    "n",
    "beta_eff",
    "status",
    "final_gap",
    "final_loss",
    "err_rating",
    "err_dpo",
    "rdpo_bound",
    "mlrdpo_bound",
    "beta1_theorem1",
    "error",
)

TIMING_HEADER = ("point_index", "algorithm", "seed", "wall_time", "rss_delta")

TRAINING_FIELDS = ("learning_rate", "steps", "log_every", "grad_clip", "tol")


class SweepKind(str, Enum):
    ACCELERATION = "ACCELERATION"
    ROBUST_SWAP = "ROBUST_SWAP"
    ROBUST_NOISE = "ROBUST_NOISE"
    ABLATION_BETA1 = "ABLATION_BETA1"
    ABLATION_VARIANCE = "ABLATION_VARIANCE"
    MISSING_RATINGS = "MISSING_RATINGS"


@dataclass(frozen=True, eq=False)
class SweepPlan:
    """One sweep: a grid over ``kind``'s knob, crossed with algorithms and seeds.

    ``n`` is the dataset size at every point except for ACCELERATION, whose
    grid values are the sizes.
    """

    kind: SweepKind
    grid: tuple[float, ...]
    algorithms: tuple[AlgorithmSpec, ...]
    seeds: tuple[int, ...]
    env_spec: EnvSpec = field(default_factory=EnvSpec)
    n: int = 400
    rating: RatingModel = field(default_factory=RatingModel)
    name: str = ""
    training: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SweepKind(self.kind))
        object.__setattr__(self, "grid", tuple(float(value) for value in self.grid))
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        object.__setattr__(self, "seeds", tuple(int(seed) for seed in self.seeds))
        object.__setattr__(self, "training", dict(self.training))
        if not self.grid:
            raise ArgumentError("sweep grid is empty")
        if not self.algorithms:
            raise ArgumentError("sweep has no algorithms")
        if not self.seeds:
            raise ArgumentError("sweep has no seeds")
        labels = [spec.label for spec in self.algorithms]
        if len(set(labels)) != len(labels):
            raise ArgumentError(f"algorithm labels must be unique, got {labels}")
        if self.kind is SweepKind.ACCELERATION and any(
            value < 1 or value != int(value) for value in self.grid
        ):
            raise ArgumentError("ACCELERATION grid values are dataset sizes")
        if self.n < 1:
            raise ArgumentError(f"dataset size must be >= 1, got {self.n}")
        unknown = sorted(set(self.training) - set(TRAINING_FIELDS))
        if unknown:
            raise ArgumentError(f"unknown training overrides {unknown}")

    def train_config(self, cfg: TrainConfig) -> TrainConfig:
        """``cfg`` with the plan's own training budget applied."""

        return replace(cfg, **self.training) if self.training else cfg

    def size_at(self, point_index: int) -> int:
        if self.kind is SweepKind.ACCELERATION:
            return int(self.grid[point_index])
        return self.n

    def corruption_at(self, point_index: int) -> CorruptionSpec:
        value = self.grid[point_index]
        if self.kind is SweepKind.ROBUST_SWAP:
            return CorruptionSpec(swap_fraction=value)
        if self.kind is SweepKind.ROBUST_NOISE:
            return CorruptionSpec(noise_variance=value)
        if self.kind is SweepKind.MISSING_RATINGS:
            return CorruptionSpec(rating_obs_prob=value)
        return CorruptionSpec()

    def spec_at(self, spec: AlgorithmSpec, point_index: int) -> AlgorithmSpec:
        value = self.grid[point_index]
        if self.kind is SweepKind.ABLATION_BETA1 and spec.family in RDPO_FAMILY:
            return spec.with_overrides(beta1=value)
        if self.kind is SweepKind.ABLATION_VARIANCE and spec.family is Family.MLRDPO:
            return spec.with_overrides(variance=value)
        return spec


@dataclass(frozen=True)
class SweepRow:
    point_index: int
    point: float
    algorithm: str
    family: str
    seed: int
    n: int
    beta_eff: float
    status: str
    final_gap: float = math.nan
    final_loss: float = math.nan
    wall_time: float = 0.0
    rss_delta: int = 0
    err_rating: float = math.nan
    err_dpo: float = math.nan
    rdpo_bound: float = math.nan
    mlrdpo_bound: float = math.nan
    beta1_theorem1: float = math.nan
    error: str = ""
    order: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def as_row(self) -> tuple[Any, ...]:
        return tuple(getattr(self, name) for name in SWEEP_HEADER)

    def timing_row(self) -> tuple[Any, ...]:
        return tuple(getattr(self, name) for name in TIMING_HEADER)


@dataclass
class ExperimentResult:
    plan: SweepPlan
    rows: list[SweepRow]

    def cell(self, point_index: int, algorithm: str) -> list[SweepRow]:
        return [
            row for row in self.rows if row.point_index == point_index and row.algorithm == algorithm
        ]

    def aggregates(self) -> list[dict[str, Any]]:
        """Mean, sample standard deviation and standard error per (point, algorithm)."""

        cells = []
        for point_index, point in enumerate(self.plan.grid):
            for spec in self.plan.algorithms:
                rows = self.cell(point_index, spec.label)
                cells.append(aggregate_cell(point_index, point, spec.label, rows))
        return cells


def aggregate_cell(
    point_index: int, point: float, algorithm: str, rows: Sequence[SweepRow]
) -> dict[str, Any]:
    gaps = [row.final_gap for row in rows if row.ok]
    losses = [row.final_loss for row in rows if row.ok]
    count = len(gaps)
    cell: dict[str, Any] = {
        "point_index": point_index,
        "point": point,
        "algorithm": algorithm,
        "count": count,
        "errors": len(rows) - count,
        "mean_gap": None,
        "std_gap": None,
        "stderr_gap": None,
        "mean_loss": None,
    }
    if count == 0:
        return cell
    mean = math.fsum(gaps) / count
    std = math.sqrt(math.fsum((gap - mean) ** 2 for gap in gaps) / (count - 1)) if count > 1 else 0.0
    cell.update(
        mean_gap=mean,
        std_gap=std,
        stderr_gap=std / math.sqrt(count),
        mean_loss=math.fsum(losses) / count,
    )
    return cell


def _run_algorithm(
    plan: SweepPlan,
    env: Environment,
    ds: Dataset,
    point_index: int,
    seed: int,
    order: int,
    cfg: TrainConfig,
    bound_settings: Mapping[str, float],
    beta1_min: float,
) -> SweepRow:
    base = plan.algorithms[order]
    common = dict(
        point_index=point_index,
        point=plan.grid[point_index],
        algorithm=base.label,
        family=base.family.value,
        seed=seed,
        n=len(ds),
        order=order,
    )
    start = time.perf_counter()
    rss_before = current_rss()
    try:
        spec = plan.spec_at(base, point_index)
        policy, trace = train(spec, env, ds, replace(cfg, seed=seed))
        err_value = empirical_err_rating(ds, env) if ds.num_rated else math.inf
        params = BoundParams(n=len(ds), r_max=env.r_star.r_max, **bound_settings)
        best = optimal_policy(env.r_star, spec.beta_eff, env.pi_ref, env.nu0)
        report = rate_bounds(params, err_value, spec.variance, c_max([best, policy], env), spec.beta)
        return SweepRow(
            beta_eff=spec.beta_eff,
            status="ok",
            final_gap=trace.final.subopt_gap,
            final_loss=trace.final.loss,
            wall_time=time.perf_counter() - start,
            rss_delta=current_rss() - rss_before,
            err_rating=err_value,
            err_dpo=report.err_dpo,
            rdpo_bound=report.rdpo_bound,
            mlrdpo_bound=report.mlrdpo_bound,
            beta1_theorem1=max(report.beta1_theorem1, beta1_min),
            **common,
        )
    except Exception as exc:
        # Failed runs become rows; the sweep carries on
        get_logger("harness").warning(
            "Sweep run %s at point %d seed %d failed: %s", base.label, point_index, seed, exc
        )
        return SweepRow(
            beta_eff=base.beta_eff,
            status="error",
            wall_time=time.perf_counter() - start,
            error=f"{type(exc).__name__}: {exc}",
            **common,
        )


def _run_point_seed(
    plan: SweepPlan,
    env: Environment,
    point_index: int,
    seed: int,
    cfg: TrainConfig,
    bound_settings: Mapping[str, float],
    beta1_min: float,
) -> list[SweepRow]:
    stream = derive_seed(seed, point_index)
    ds = sample_dataset(env, plan.size_at(point_index), plan.rating, derive_seed(stream, 0))
    ds = plan.corruption_at(point_index).apply(ds, derive_seed(stream, 1))
    rows = [
        _run_algorithm(plan, env, ds, point_index, seed, order, cfg, bound_settings, beta1_min)
        for order in range(len(plan.algorithms))
    ]
    get_logger("harness").info(
        "Sweep point %d (%s=%g) seed %d done", point_index, plan.kind.value, plan.grid[point_index], seed
    )
    return rows


def run_sweep(
    plan: SweepPlan,
    cfg: TrainConfig,
    *,
    workers: int = 1,
    bound_settings: Optional[Mapping[str, float]] = None,
    beta1_min: float = 1e-6,
) -> ExperimentResult:
    """Train every (point, algorithm, seed) combination on a bounded thread pool.

    All algorithms at one (point, seed) share the same dataset. Rows come back
    sorted by (point, algorithm, seed) whatever order the workers finish in.
    """

    cfg = plan.train_config(cfg)
    if cfg.mode is not TrainMode.EMPIRICAL:
        raise ArgumentError("sweeps train on sampled datasets (EMPIRICAL mode)")
    env = make_environment(plan.env_spec)
    settings = dict(bound_settings or {})
    tasks = [(point_index, seed) for point_index in range(len(plan.grid)) for seed in plan.seeds]
    logger = get_logger("harness")
    logger.info(
        "Starting %s sweep: %d points x %d algorithms x %d seeds",
        plan.kind.value,
        len(plan.grid),
        len(plan.algorithms),
        len(plan.seeds),
    )
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [
            pool.submit(_run_point_seed, plan, env, point_index, seed, cfg, settings, beta1_min)
            for point_index, seed in tasks
        ]
        rows = [row for future in futures for row in future.result()]
    rows.sort(key=lambda row: (row.point_index, row.order, row.seed))
    failures = sum(1 for row in rows if not row.ok)
    if failures:
        logger.warning("%d of %d sweep runs failed", failures, len(rows))
    return ExperimentResult(plan, rows)


# Plans --------------------------------------------------------------------

_PLAN_FIELDS = {
    "kind", "grid", "algorithms", "seeds", "n", "rating", "environment", "name", "training"
}


def plan_from_dict(
    document: Mapping[str, Any], env_defaults: Optional[Mapping[str, Any]] = None
) -> SweepPlan:
    if not isinstance(document, Mapping):
        raise SchemaError("<document>", "sweep plan must be a mapping")
    for key in document:
        if key not in _PLAN_FIELDS:
            raise SchemaError(str(key), "unknown sweep plan field")
    for key in ("kind", "grid", "algorithms", "seeds"):
        if key not in document:
            raise SchemaError(key, "missing field")
    try:
        kind = SweepKind(str(document["kind"]).upper())
    except ValueError as exc:
        raise SchemaError("kind", f"unknown sweep kind {document['kind']!r}") from exc

    seeds = document["seeds"]
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    rating_doc = document.get("rating") or {}
    if not isinstance(rating_doc, Mapping):
        raise SchemaError("rating", "expected a mapping")
    mode = str(rating_doc.get("mode", RatingMode.EXACT.value)).upper()
    if mode not in (RatingMode.EXACT.value, RatingMode.GAUSSIAN.value):
        raise SchemaError("rating.mode", f"sweeps support EXACT or GAUSSIAN ratings, got {mode!r}")
    rating = RatingModel(RatingMode(mode), float(rating_doc.get("variance", 0.0)))

    env_values = dict(env_defaults or {})
    env_doc = document.get("environment") or {}
    if not isinstance(env_doc, Mapping):
        raise SchemaError("environment", "expected a mapping")
    env_values.update(env_doc)
    try:
        env_spec = EnvSpec(**env_values)
    except TypeError as exc:
        raise SchemaError("environment", str(exc)) from exc

    training = document.get("training") or {}
    if not isinstance(training, Mapping):
        raise SchemaError("training", "expected a mapping")
    overrides: dict[str, Any] = {}
    for key, value in training.items():
        if key not in TRAINING_FIELDS:
            raise SchemaError(f"training.{key}", "unknown training override")
        if value is None and key == "grad_clip":
            overrides[key] = None
            continue
        try:
            overrides[key] = int(value) if key in ("steps", "log_every") else float(value)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"training.{key}", f"expected a number, got {value!r}") from exc

    algorithms = document["algorithms"]
    if not isinstance(algorithms, list):
        raise SchemaError("algorithms", "expected a list of algorithm specs")
    return SweepPlan(
        kind=kind,
        grid=tuple(document["grid"]),
        algorithms=tuple(spec_from_dict(item) for item in algorithms),
        seeds=tuple(seed_list),
        env_spec=env_spec,
        n=int(document.get("n", 400)),
        rating=rating,
        name=str(document.get("name", "")),
        training=overrides,
    )


def load_plan(path: str | Path, env_defaults: Optional[Mapping[str, Any]] = None) -> SweepPlan:
    """Read a sweep plan from YAML or JSON."""

    with Path(path).open("r", encoding="utf-8") as handle:
        try:
            document = yaml.safe_load(handle)
        except yaml.YAMLError as exc:
            raise SchemaError("<document>", f"{path}: {exc}") from exc
    return plan_from_dict(document, env_defaults)


def plan_to_dict(plan: SweepPlan) -> dict[str, Any]:
    env = plan.env_spec
    return {
        "name": plan.name,
        "kind": plan.kind.value,
        "grid": list(plan.grid),
        "algorithms": [spec_to_dict(spec) for spec in plan.algorithms],
        "seeds": list(plan.seeds),
        "n": plan.n,
        "rating": {"mode": plan.rating.mode.value, "variance": plan.rating.variance},
        "training": dict(plan.training),
        "environment": {
            "num_prompts": env.num_prompts,
            "num_responses": env.num_responses,
            "r_max": env.r_max,
            "reward_seed": env.reward_seed,
            "prompt_concentration": env.prompt_concentration,
            "data_logit_scale": env.data_logit_scale,
            "ref_logit_scale": env.ref_logit_scale,
        },
    }


# Commands -----------------------------------------------------------------


def cmd_generate(
    env_spec: EnvSpec,
    n: int,
    rating: RatingModel,
    corruption: CorruptionSpec,
    out_dir: str | Path,
    seed: int = 0,
) -> dict[str, Any]:
    """Write ``environment.json`` and ``dataset.jsonl`` under ``out_dir``."""

    out = Path(out_dir)
    env = make_environment(env_spec)
    ds = sample_dataset(env, n, rating, derive_seed(seed, 0))
    ds = corruption.apply(ds, derive_seed(seed, 1)).with_seed(seed)
    env_path = save_environment(env, out / "environment.json")
    ds_path = save_dataset(ds, out / "dataset.jsonl")
    summary = {
        "n": len(ds),
        "rated_fraction": ds.num_rated / len(ds),
        "err_rating": empirical_err_rating(ds, env) if ds.num_rated else None,
        "environment": str(env_path),
        "dataset": str(ds_path),
    }
    get_logger("harness").info("Generated %d comparisons into %s", len(ds), out)
    return summary


def cmd_train(
    env_path: str | Path,
    ds_path: Optional[str | Path],
    spec: AlgorithmSpec,
    cfg: TrainConfig,
    out_dir: str | Path,
    rating: Optional[RatingModel] = None,
) -> dict[str, Any]:
    """Train and write ``policy.json``, ``trace.csv`` and ``trace_meta.json``."""

    env = load_environment(env_path)
    if cfg.mode is TrainMode.POPULATION:
        data: Any = rating or RatingModel.exact()
    else:
        if ds_path is None:
            raise ArgumentError("EMPIRICAL training needs a dataset path")
        data = load_dataset(ds_path)
    policy, trace = train(spec, env, data, cfg)

    out = Path(out_dir)
    save_policy(policy, out / "policy.json")
    write_trace_csv(trace, out / "trace.csv")
    write_json(out / "trace_meta.json", {"spec": spec_to_dict(spec), **trace.metadata})
    return {
        "algorithm": spec.label,
        "steps_run": trace.metadata["steps_run"],
        "initial_loss": trace.initial.loss,
        "final_loss": trace.final.loss,
        "final_gap": trace.final.subopt_gap,
        "policy": str(out / "policy.json"),
        "trace": str(out / "trace.csv"),
    }


def cmd_eval(
    env_path: str | Path,
    policy_path: str | Path,
    spec: AlgorithmSpec,
    ds_path: Optional[str | Path] = None,
) -> dict[str, Any]:
    """Suboptimality gap, KL to π_ref, concentrability and (given data) mean loss."""

    env = load_environment(env_path)
    policy = load_policy(policy_path)
    beta_eff = spec.beta_eff
    report: dict[str, Any] = {
        "algorithm": spec.label,
        "beta_eff": beta_eff,
        "subopt_gap": suboptimality_gap(policy, env, beta_eff),
        "kl_to_ref": kl_divergence(policy, env.pi_ref, env.nu0),
        "concentrability": concentrability(policy, env),
        "c_star": c_star(env, beta_eff),
        "loss": None,
    }
    if ds_path is not None:
        objective = Objective.empirical(spec, env, load_dataset(ds_path))
        report["loss"] = objective.value(policy) / objective.size
    return report


def _gradcheck_data(spec: AlgorithmSpec, env: Environment, n: int, seed: int) -> Dataset:
    ds = sample_dataset(env, n, RatingModel.gaussian(0.25), derive_seed(seed, 0))
    if spec.family in HETERO_FAMILIES:
        ds = mask_ratings(ds, 0.5, derive_seed(seed, 2))
    return ds


def cmd_gradcheck(
    spec: AlgorithmSpec, env_spec: EnvSpec, seed: int = 0, n: int = 64, step: float = 1e-5
) -> dict[str, Any]:
    """Finite-difference check of ``spec`` at a random policy on a random instance.

    Interval-penalised losses are piecewise smooth, so they get the looser
    threshold.
    """

    env = make_environment(replace(env_spec, reward_seed=seed))
    ds = _gradcheck_data(spec, env, n, seed)
    policy = SoftmaxPolicy(0.5 * make_rng(derive_seed(seed, 1)).standard_normal(env.shape))
    error = finite_diff_gradcheck(spec, policy, env, ds, step=step, seed=seed)
    kinked = spec.family is Family.RDPO_PENALIZED and (spec.lambda1 > 0 or spec.lambda2 > 0)
    threshold = KINK_GRADCHECK_THRESHOLD if kinked else GRADCHECK_THRESHOLD
    return {
        "algorithm": spec.label,
        "family": spec.family.value,
        "max_rel_error": error,
        "threshold": threshold,
        "passed": error <= threshold,
    }


def cmd_bounds(
    params: BoundParams,
    err_rating_value: float,
    variance: float,
    c_conc: float,
    *,
    beta: float = 0.1,
    beta1_min: float = 1e-6,
    c_star_value: Optional[float] = None,
    p_rat: Optional[float] = None,
    p_rank: Optional[float] = None,
    r_min: float = 0.0,
) -> dict[str, Any]:
    """Rate diagnostics with the prescribed β₁ clamped to ``beta1_min``."""

    report = rate_bounds(params, err_rating_value, variance, c_conc, beta)
    single = c_conc if c_star_value is None else c_star_value
    result: dict[str, Any] = {
        "err_dpo": report.err_dpo,
        "rdpo_bound": report.rdpo_bound,
        "mlrdpo_bound": report.mlrdpo_bound,
        "beta1_theorem1": max(report.beta1_theorem1, beta1_min),
        "beta1_unclamped": report.beta1_theorem1,
        "alpha": mixing_alpha(err_rating_value, report.err_dpo),
        "gamma": gamma_prescription(report.err_dpo, err_rating_value, beta, single),
        "hetero_bound": None,
    }
    if p_rat is not None and p_rank is not None:
        result["hetero_bound"] = hetero_rate_bound(params, variance, single, p_rat, p_rank, r_min)
    return result


def cmd_sweep(
    plan: SweepPlan,
    cfg: TrainConfig,
    out_dir: str | Path,
    *,
    workers: int = 1,
    bound_settings: Optional[Mapping[str, float]] = None,
    beta1_min: float = 1e-6,
) -> ExperimentResult:
    """Run ``plan`` and write ``plan.json``, ``sweep.csv``, ``aggregate.json`` and ``timings.csv``.

    Wall time and RSS growth go to ``timings.csv`` so the other three files
    depend on the inputs only.
    """

    result = run_sweep(
        plan, cfg, workers=workers, bound_settings=bound_settings, beta1_min=beta1_min
    )
    out = Path(out_dir)
    write_json(out / "plan.json", plan_to_dict(plan))
    write_csv(out / "sweep.csv", SWEEP_HEADER, (row.as_row() for row in result.rows))
    write_csv(out / "timings.csv", TIMING_HEADER, (row.timing_row() for row in result.rows))
    write_json(
        out / "aggregate.json",
        {"kind": plan.kind.value, "name": plan.name, "cells": result.aggregates()},
    )
    return result


def paired_gap_difference(
    result: ExperimentResult, point_index: int, first: str, second: str
) -> tuple[float, float]:
    """Mean and standard error of ``gap(first) − gap(second)`` over shared seeds."""

    gaps_a = {row.seed: row.final_gap for row in result.cell(point_index, first) if row.ok}
    gaps_b = {row.seed: row.final_gap for row in result.cell(point_index, second) if row.ok}
    shared = sorted(set(gaps_a) & set(gaps_b))
    if len(shared) < 2:
        raise ArgumentError("paired comparison needs at least two shared seeds")
    diffs = np.array([gaps_a[seed] - gaps_b[seed] for seed in shared])
    return float(diffs.mean()), float(diffs.std(ddof=1) / math.sqrt(len(diffs)))
