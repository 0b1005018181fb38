from __future__ import annotations

import json
from pathlib import Path

import pytest

from src.errors import ArgumentError, DataError, SchemaError
from src.harness import (
    KINK_GRADCHECK_THRESHOLD,
    SWEEP_HEADER,
    TIMING_HEADER,
    SweepKind,
    SweepPlan,
    aggregate_cell,
    cmd_bounds,
    cmd_eval,
    cmd_generate,
    cmd_gradcheck,
    cmd_sweep,
    cmd_train,
    load_plan,
    paired_gap_difference,
    plan_from_dict,
    run_sweep,
)
from src.losses import AlgorithmSpec, Family
from src.oracle import BoundParams
from src.serialization import load_dataset, read_csv_rows, save_dataset
from src.synth_env import CorruptionSpec, EnvSpec, RatingModel
from src.trainer import TrainConfig, TrainMode

SMALL = EnvSpec(num_prompts=3, num_responses=4, reward_seed=7, data_logit_scale=0.5)
FAST = TrainConfig(learning_rate=2.0, steps=300, log_every=300)


def _plan(kind: SweepKind, grid, algorithms, seeds=(0, 1, 2), n: int = 200) -> SweepPlan:
    return SweepPlan(kind=kind, grid=tuple(grid), algorithms=tuple(algorithms), seeds=tuple(seeds), env_spec=SMALL, n=n)


def test_generate_exact_is_reproducible(tmp_path: Path) -> None:
    first = cmd_generate(SMALL, 300, RatingModel.exact(), CorruptionSpec(), tmp_path / "a", seed=5)
    second = cmd_generate(SMALL, 300, RatingModel.exact(), CorruptionSpec(), tmp_path / "b", seed=5)
    assert first["err_rating"] == 0.0
    assert first["rated_fraction"] == 1.0
    for name in ("environment.json", "dataset.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert second["n"] == 300


def test_generate_with_masked_ratings(tmp_path: Path) -> None:
    summary = cmd_generate(
        SMALL, 2000, RatingModel.exact(), CorruptionSpec(rating_obs_prob=0.5), tmp_path, seed=1
    )
    assert 0.45 <= summary["rated_fraction"] <= 0.55
    none = cmd_generate(SMALL, 50, RatingModel.exact(), CorruptionSpec(rating_obs_prob=0.0), tmp_path / "none")
    assert none["err_rating"] is None


def test_train_ignores_ratings_for_ranking_losses(tmp_path: Path) -> None:
    cmd_generate(SMALL, 200, RatingModel.gaussian(0.1), CorruptionSpec(), tmp_path / "data", seed=2)
    env_path = tmp_path / "data" / "environment.json"
    rated_path = tmp_path / "data" / "dataset.jsonl"
    stripped_path = save_dataset(load_dataset(rated_path).strip_ratings(), tmp_path / "data" / "stripped.jsonl")
    cfg = TrainConfig(learning_rate=1.0, steps=50, log_every=10)
    spec = AlgorithmSpec(Family.DPO)
    cmd_train(env_path, rated_path, spec, cfg, tmp_path / "rated")
    cmd_train(env_path, stripped_path, spec, cfg, tmp_path / "stripped")
    for name in ("policy.json", "trace.csv"):
        assert (tmp_path / "rated" / name).read_bytes() == (tmp_path / "stripped" / name).read_bytes()
    with pytest.raises(DataError):
        cmd_train(env_path, stripped_path, AlgorithmSpec(Family.RDPO), cfg, tmp_path / "rdpo")


def test_train_then_eval(tmp_path: Path) -> None:
    cmd_generate(SMALL, 300, RatingModel.exact(), CorruptionSpec(), tmp_path, seed=3)
    spec = AlgorithmSpec(Family.MLRDPO, beta=0.5, variance=0.5)
    cfg = TrainConfig(learning_rate=1.0, steps=100, log_every=25)
    summary = cmd_train(tmp_path / "environment.json", tmp_path / "dataset.jsonl", spec, cfg, tmp_path / "run")
    first_trace = (tmp_path / "run" / "trace.csv").read_bytes()
    cmd_train(tmp_path / "environment.json", tmp_path / "dataset.jsonl", spec, cfg, tmp_path / "run")
    assert (tmp_path / "run" / "trace.csv").read_bytes() == first_trace

    rows = read_csv_rows(tmp_path / "run" / "trace.csv")
    assert [int(row["step"]) for row in rows] == [0, 25, 50, 75, 100]
    meta = json.loads((tmp_path / "run" / "trace_meta.json").read_text(encoding="utf-8"))
    assert meta["spec"]["family"] == "MLRDPO"
    assert meta["steps_run"] == 100

    report = cmd_eval(
        tmp_path / "environment.json", summary["policy"], spec, tmp_path / "dataset.jsonl"
    )
    assert report["subopt_gap"] == pytest.approx(summary["final_gap"], rel=1e-9)
    assert report["loss"] == pytest.approx(summary["final_loss"], rel=1e-9)
    assert report["concentrability"] >= 1.0


def test_population_training_needs_no_dataset(tmp_path: Path) -> None:
    cmd_generate(SMALL, 10, RatingModel.exact(), CorruptionSpec(), tmp_path)
    cfg = TrainConfig(learning_rate=2.0, steps=20, mode=TrainMode.POPULATION)
    summary = cmd_train(tmp_path / "environment.json", None, AlgorithmSpec(Family.DPO, beta=1.0), cfg, tmp_path / "pop")
    assert summary["final_loss"] < summary["initial_loss"]
    with pytest.raises(ArgumentError):
        cmd_train(tmp_path / "environment.json", None, AlgorithmSpec(Family.DPO), TrainConfig(), tmp_path / "x")


def test_sweep_rows_and_aggregates(tmp_path: Path) -> None:
    plan = _plan(
        SweepKind.ACCELERATION,
        [100, 400],
        [AlgorithmSpec(Family.DPO), AlgorithmSpec(Family.MLRDPO, variance=0.01)],
    )
    result = cmd_sweep(plan, FAST, tmp_path, workers=3)
    assert len(result.rows) == 2 * 2 * 3
    assert all(row.ok for row in result.rows)
    assert [row.n for row in result.rows[:3]] == [100, 100, 100]

    cells = json.loads((tmp_path / "aggregate.json").read_text(encoding="utf-8"))["cells"]
    assert len(cells) == 4
    assert all(cell["count"] == 3 for cell in cells)
    csv_rows = read_csv_rows(tmp_path / "sweep.csv")
    assert list(csv_rows[0]) == list(SWEEP_HEADER)
    assert len(csv_rows) == 12
    assert (tmp_path / "plan.json").exists()
    timings = read_csv_rows(tmp_path / "timings.csv")
    assert list(timings[0]) == list(TIMING_HEADER)
    assert len(timings) == 12

    for point_index in range(2):
        ml = result.aggregates()[2 * point_index + 1]
        dpo = result.aggregates()[2 * point_index]
        assert ml["mean_gap"] < dpo["mean_gap"]
    mean_diff, _ = paired_gap_difference(result, 0, "MLRDPO", "DPO")
    assert mean_diff < 0.0


def test_sweep_seeds_are_isolated() -> None:
    algorithms = [AlgorithmSpec(Family.RDPO, beta1=0.5)]
    wide = run_sweep(_plan(SweepKind.ROBUST_SWAP, [0.0, 0.3], algorithms, seeds=(0, 1, 2)), FAST, workers=2)
    narrow = run_sweep(_plan(SweepKind.ROBUST_SWAP, [0.0, 0.3], algorithms, seeds=(1,)), FAST, workers=1)
    for row in narrow.rows:
        twin = next(r for r in wide.rows if r.seed == 1 and r.point_index == row.point_index)
        assert twin.final_gap == row.final_gap
        assert twin.err_rating == row.err_rating
    clean, swapped = (wide.cell(index, "RDPO")[0] for index in range(2))
    assert clean.err_rating == 0.0
    assert swapped.err_rating > 0.0


def test_sweep_failures_become_rows() -> None:
    plan = _plan(
        SweepKind.MISSING_RATINGS,
        [0.0, 1.0],
        [AlgorithmSpec(Family.DPO), AlgorithmSpec(Family.RDPO), AlgorithmSpec(Family.MLRDPO_HETERO)],
        seeds=(0, 1),
    )
    result = run_sweep(plan, FAST)
    rdpo_missing = result.cell(0, "RDPO")
    assert all(row.status == "error" and "DataError" in row.error for row in rdpo_missing)
    assert all(row.ok for row in result.cell(1, "RDPO"))
    cell = aggregate_cell(0, 0.0, "RDPO", rdpo_missing)
    assert cell["count"] == 0 and cell["mean_gap"] is None and cell["errors"] == 2

    for dpo, hetero in zip(result.cell(0, "DPO"), result.cell(0, "MLRDPO_HETERO")):
        assert dpo.final_gap == hetero.final_gap
        assert dpo.err_rating == float("inf")


def test_ablation_overrides_trust_weight() -> None:
    plan = _plan(SweepKind.ABLATION_BETA1, [0.01, 1.0], [AlgorithmSpec(Family.RDPO), AlgorithmSpec(Family.DPO)])
    assert plan.spec_at(plan.algorithms[0], 1).beta1 == 1.0
    assert plan.spec_at(plan.algorithms[1], 1) is plan.algorithms[1]
    variance_plan = _plan(
        SweepKind.ABLATION_VARIANCE, [0.5], [AlgorithmSpec(Family.MLRDPO), AlgorithmSpec(Family.MLRDPO_HETERO)]
    )
    assert variance_plan.spec_at(variance_plan.algorithms[0], 0).variance == 0.5
    # the heterogeneous rating term carries no variance weight
    assert variance_plan.spec_at(variance_plan.algorithms[1], 0) is variance_plan.algorithms[1]


def test_sweep_outputs_are_byte_identical(tmp_path: Path) -> None:
    plan = _plan(
        SweepKind.ROBUST_SWAP, [0.0, 0.3], [AlgorithmSpec(Family.DPO), AlgorithmSpec(Family.RDPO)], seeds=(0, 1)
    )
    cmd_sweep(plan, FAST, tmp_path / "first", workers=2)
    cmd_sweep(plan, FAST, tmp_path / "second", workers=1)
    for name in ("plan.json", "sweep.csv", "aggregate.json"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()
    assert "wall_time" not in (tmp_path / "first" / "sweep.csv").read_text(encoding="utf-8")


def test_plan_training_budget() -> None:
    plan = _plan(SweepKind.ACCELERATION, [50], [AlgorithmSpec(Family.DPO)])
    assert plan.train_config(FAST) is FAST
    budget = SweepPlan(
        kind=SweepKind.ACCELERATION,
        grid=(50,),
        algorithms=(AlgorithmSpec(Family.DPO),),
        seeds=(0,),
        env_spec=SMALL,
        training={"steps": 7, "log_every": 7},
    )
    cfg = budget.train_config(FAST)
    assert (cfg.steps, cfg.log_every, cfg.learning_rate) == (7, 7, FAST.learning_rate)
    row = run_sweep(budget, FAST).rows[0]
    assert row.ok
    with pytest.raises(ArgumentError):
        SweepPlan(
            kind=SweepKind.ACCELERATION,
            grid=(50,),
            algorithms=(AlgorithmSpec(Family.DPO),),
            seeds=(0,),
            training={"momentum": 0.9},
        )


def test_population_sweeps_are_refused() -> None:
    plan = _plan(SweepKind.ACCELERATION, [10], [AlgorithmSpec(Family.DPO)])
    with pytest.raises(ArgumentError):
        run_sweep(plan, TrainConfig(mode=TrainMode.POPULATION))


def test_plan_validation() -> None:
    with pytest.raises(ArgumentError):
        _plan(SweepKind.ACCELERATION, [10.5], [AlgorithmSpec(Family.DPO)])
    with pytest.raises(ArgumentError):
        _plan(SweepKind.ROBUST_NOISE, [0.1], [AlgorithmSpec(Family.DPO), AlgorithmSpec(Family.DPO)])
    with pytest.raises(ArgumentError):
        _plan(SweepKind.ROBUST_NOISE, [], [AlgorithmSpec(Family.DPO)])


def test_plan_from_yaml(tmp_path: Path) -> None:
    path = tmp_path / "plan.yaml"
    path.write_text(
        """
name: noise
kind: robust_noise
grid: [0.0, 0.5]
seeds: 4
n: 150
rating:
  mode: gaussian
  variance: 0.1
environment:
  num_prompts: 3
algorithms:
  - family: RDPO
    beta1: 0.2
  - family: MLRDPO
    variance: 0.1
        """,
        encoding="utf-8",
    )
    plan = load_plan(path, {"num_responses": 4})
    assert plan.kind is SweepKind.ROBUST_NOISE
    assert plan.seeds == (0, 1, 2, 3)
    assert plan.env_spec.num_prompts == 3 and plan.env_spec.num_responses == 4
    assert plan.rating.noise_variance == 0.1
    assert [spec.label for spec in plan.algorithms] == ["RDPO", "MLRDPO"]
    assert plan.corruption_at(1).noise_variance == 0.5


@pytest.mark.parametrize(
    ("document", "field"),
    [
        ({"kind": "ACCELERATION", "grid": [10], "algorithms": [], "seeds": 1, "budget": 3}, "budget"),
        ({"kind": "ACCELERATION", "grid": [10], "algorithms": [{"family": "DPO"}]}, "seeds"),
        ({"kind": "SPEEDUP", "grid": [10], "algorithms": [{"family": "DPO"}], "seeds": 1}, "kind"),
        (
            {"kind": "ACCELERATION", "grid": [10], "algorithms": [{"family": "DPO"}], "seeds": 1, "rating": {"mode": "BIASED"}},
            "rating.mode",
        ),
        (
            {"kind": "ACCELERATION", "grid": [10], "algorithms": [{"family": "DPO"}], "seeds": 1, "environment": {"arms": 3}},
            "environment",
        ),
        ({"kind": "ACCELERATION", "grid": [10], "algorithms": [{"family": "DPO", "eta": 1}], "seeds": 1}, "eta"),
        (
            {"kind": "ACCELERATION", "grid": [10], "algorithms": [{"family": "DPO"}], "seeds": 1, "training": {"epochs": 3}},
            "training.epochs",
        ),
        (
            {"kind": "ACCELERATION", "grid": [10], "algorithms": [{"family": "DPO"}], "seeds": 1, "training": {"steps": "many"}},
            "training.steps",
        ),
    ],
)
def test_plan_schema_errors(document: dict, field: str) -> None:
    with pytest.raises(SchemaError) as info:
        plan_from_dict(document)
    assert info.value.field == field


@pytest.mark.parametrize(
    "spec",
    [
        AlgorithmSpec(Family.DPO),
        AlgorithmSpec(Family.RDPO),
        AlgorithmSpec(Family.MLRDPO),
        AlgorithmSpec(Family.RPO, beta=1.0),
        AlgorithmSpec(Family.MLRDPO_HETERO),
        AlgorithmSpec(Family.RDPO_HETERO),
    ],
    ids=lambda spec: spec.label,
)
def test_gradcheck_command_passes(spec: AlgorithmSpec) -> None:
    report = cmd_gradcheck(spec, EnvSpec(num_prompts=3, num_responses=4), seed=3)
    assert report["passed"] is True
    assert report["family"] == spec.family.value


def test_gradcheck_threshold_for_penalty() -> None:
    spec = AlgorithmSpec(Family.RDPO_PENALIZED, lambda1=1.0, lambda2=1.0, delta_max=1.0)
    report = cmd_gradcheck(spec, EnvSpec(num_prompts=3, num_responses=4), seed=1)
    assert report["threshold"] == KINK_GRADCHECK_THRESHOLD


def test_bounds_command_clamps_trust() -> None:
    report = cmd_bounds(BoundParams(), 0.0, 0.01, 1.0, beta1_min=1e-6)
    assert report["beta1_theorem1"] == 1e-6
    assert report["beta1_unclamped"] == 0.0
    assert report["alpha"] == 1.0
    assert report["gamma"] == 0.0
    assert report["hetero_bound"] is None
    with_hetero = cmd_bounds(BoundParams(), 0.5, 0.01, 1.0, p_rat=0.5, p_rank=0.5)
    assert with_hetero["hetero_bound"] > 0.0
    assert with_hetero["beta1_theorem1"] == pytest.approx(0.1 * 0.5 / with_hetero["err_dpo"])
