from __future__ import annotations

from pathlib import Path

import pytest

from src.config import LabConfig, load_config
from src.errors import SchemaError
from src.trainer import TrainMode


def test_load_config_with_sections(tmp_path: Path) -> None:
    config_path = tmp_path / "config.yaml"
    config_path.write_text(
        """
log_path: logs/lab.log
log_level: debug
workers: 3
beta1_min: 1.0e-4
environment:
  num_prompts: 5
  r_max: 1.5
training:
  learning_rate: 0.5
  steps: 300
  mode: population
bounds:
  c: 8
resource_summary_path: summary.json
resource_alerts:
  CPU: 80
  rss: null
alert_cooldown_seconds: 0.2
        """,
        encoding="utf-8",
    )

    config = load_config(config_path)

    assert config.log_path == "logs/lab.log"
    assert config.log_level == "DEBUG"
    assert config.workers == 3
    assert config.beta1_min == 1e-4
    assert config.resource_summary_path == "summary.json"
    assert config.resource_log_path is None
    assert config.resource_alerts == {"cpu": 80.0}
    assert config.alert_cooldown_seconds == 1.0  # clamped to the minimum

    env_spec = config.env_spec(num_responses=7, reward_seed=None)
    assert (env_spec.num_prompts, env_spec.num_responses, env_spec.r_max) == (5, 7, 1.5)

    train_cfg = config.train_config(steps=None, seed=9)
    assert train_cfg.mode is TrainMode.POPULATION
    assert train_cfg.steps == 300
    assert train_cfg.learning_rate == 0.5
    assert train_cfg.seed == 9

    params = config.bound_params(250, 1.5)
    assert (params.c, params.n, params.r_max) == (8.0, 250, 1.5)


def test_missing_file_gives_defaults(tmp_path: Path) -> None:
    config = load_config(tmp_path / "absent.yaml")
    assert config == LabConfig()
    assert config.env_spec().num_prompts == 8
    assert config.train_config().steps == 2000


def test_shipped_config_loads() -> None:
    config = load_config(Path(__file__).resolve().parents[1] / "config.yaml")
    assert config.workers >= 1
    assert config.env_spec().num_responses == 6


@pytest.mark.parametrize(
    ("text", "field"),
    [
        ("color: blue\n", "color"),
        ("environment:\n  arms: 4\n", "environment.arms"),
        ("training:\n  steps: many\n", "training.steps"),
        ("training:\n  mode: online\n", "training.mode"),
        ("bounds: 3\n", "bounds"),
        ("- 1\n- 2\n", "<document>"),
    ],
)
def test_invalid_settings_are_named(tmp_path: Path, text: str, field: str) -> None:
    config_path = tmp_path / "config.yaml"
    config_path.write_text(text, encoding="utf-8")
    with pytest.raises(SchemaError) as info:
        load_config(config_path)
    assert info.value.field == field
