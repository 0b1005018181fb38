from __future__ import annotations

from pathlib import Path

import pytest

from src.harness import ExperimentResult, load_plan, paired_gap_difference, run_sweep
from src.trainer import TrainConfig

PLANS = Path(__file__).resolve().parents[1] / "plans"

pytestmark = pytest.mark.slow


def _run(name: str) -> ExperimentResult:
    plan = load_plan(PLANS / f"{name}.yaml")
    result = run_sweep(plan, TrainConfig(), workers=4)
    assert all(row.ok for row in result.rows), [row.error for row in result.rows if not row.ok]
    return result


def _mean_gaps(result: ExperimentResult, algorithm: str) -> list[float]:
    return [
        cell["mean_gap"] for cell in result.aggregates() if cell["algorithm"] == algorithm
    ]


def test_rating_losses_beat_dpo_at_every_size() -> None:
    result = _run("acceleration")
    dpo = _mean_gaps(result, "DPO")
    assert len(dpo) == 4
    for rdpo_gap, ml_gap, dpo_gap in zip(_mean_gaps(result, "RDPO"), _mean_gaps(result, "MLRDPO"), dpo):
        assert rdpo_gap < dpo_gap
        assert ml_gap < dpo_gap


@pytest.mark.parametrize("name", ["robust_swap", "robust_noise"])
def test_cautious_trust_survives_corrupted_ratings(name: str) -> None:
    result = _run(name)
    trusting = _mean_gaps(result, "RDPO-trusting")
    cautious = _mean_gaps(result, "RDPO-cautious")
    dpo = _mean_gaps(result, "DPO")
    assert trusting[0] < trusting[1] < trusting[2]
    for cautious_gap, dpo_gap in zip(cautious, dpo):
        assert cautious_gap <= 1.25 * dpo_gap


def test_partial_ratings_help_and_no_ratings_match_dpo() -> None:
    result = _run("missing_ratings")
    hetero = _mean_gaps(result, "MLRDPO_HETERO")
    dpo = _mean_gaps(result, "DPO")
    assert hetero[1] <= dpo[1]
    mean_diff, stderr = paired_gap_difference(result, 0, "MLRDPO_HETERO", "DPO")
    assert abs(mean_diff) <= 2.0 * stderr
