"""Configuration handling for ratinglab."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping

import yaml

from .errors import SchemaError
from .oracle import BoundParams
from .synth_env import EnvSpec
from .trainer import TrainConfig, TrainMode

_ENV_FLOATS = {"r_max", "prompt_concentration", "data_logit_scale", "ref_logit_scale"}
_ENV_INTS = {"num_prompts", "num_responses", "reward_seed"}
_TRAIN_FLOATS = {"learning_rate", "grad_clip", "tol"}
_TRAIN_INTS = {"steps", "log_every"}
_BOUND_FLOATS = {"c", "delta", "policy_class_size"}


@dataclass(slots=True)
class LabConfig:
    """Structured configuration for the command line."""

    log_path: str | None = None
    log_level: str = "INFO"
    workers: int = 1
    beta1_min: float = 1e-6
    environment: Dict[str, Any] = field(default_factory=dict)
    training: Dict[str, Any] = field(default_factory=dict)
    bounds: Dict[str, float] = field(default_factory=dict)
    monitor_interval: float = 1.0
    resource_log_path: str | None = None
    resource_summary_path: str | None = None
    resource_alerts: Dict[str, float] = field(default_factory=dict)
    alert_cooldown_seconds: float = 60.0

    def env_spec(self, **overrides: Any) -> EnvSpec:
        """Environment generator parameters with command-line overrides applied."""

        values = dict(self.environment)
        values.update({key: value for key, value in overrides.items() if value is not None})
        return EnvSpec(**values)

    def train_config(self, **overrides: Any) -> TrainConfig:
        values = dict(self.training)
        values.update({key: value for key, value in overrides.items() if value is not None})
        return TrainConfig(**values)

    def bound_params(self, n: int, r_max: float) -> BoundParams:
        return BoundParams(n=n, r_max=r_max, **self.bounds)


def _ensure_float(value: Any, default: float, minimum: float | None = None) -> float:
    try:
        result = float(value)
    except (TypeError, ValueError):
        result = default
    if minimum is not None:
        result = max(result, minimum)
    return result


def _normalise_alerts(alerts: Any) -> Dict[str, float]:
    if not isinstance(alerts, Mapping):
        return {}
    normalised: Dict[str, float] = {}
    for key, value in alerts.items():
        if value is None:
            continue
        try:
            normalised[str(key).lower()] = float(value)
        except (TypeError, ValueError):
            continue
    return normalised


def _ensure_path_str(value: Any) -> str | None:
    if value in (None, ""):
        return None
    return str(value)


def _normalise_section(
    section: Any, name: str, floats: set[str], ints: set[str]
) -> Dict[str, Any]:
    if section is None:
        return {}
    if not isinstance(section, Mapping):
        raise SchemaError(name, "expected a mapping")
    normalised: Dict[str, Any] = {}
    for key, value in section.items():
        key_lower = str(key).lower()
        if key_lower not in floats | ints:
            raise SchemaError(f"{name}.{key_lower}", "unknown setting")
        if value is None:
            normalised[key_lower] = None
            continue
        try:
            normalised[key_lower] = int(value) if key_lower in ints else float(value)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{name}.{key_lower}", f"expected a number, got {value!r}") from exc
    return normalised


def _normalise_training(section: Any) -> Dict[str, Any]:
    mode = None
    if isinstance(section, Mapping) and "mode" in section:
        section = dict(section)
        mode = str(section.pop("mode")).upper()
    training = _normalise_section(section, "training", _TRAIN_FLOATS, _TRAIN_INTS)
    if mode is not None:
        try:
            training["mode"] = TrainMode(mode)
        except ValueError as exc:
            raise SchemaError("training.mode", f"unknown mode {mode!r}") from exc
    return training


def load_config(path: str | Path = "config.yaml") -> LabConfig:
    """Load configuration from ``path``; a missing file yields the defaults.

    JSON documents are valid YAML, so ``--config settings.json`` works too.
    """

    config_path = Path(path)
    if not config_path.exists():
        return LabConfig()
    with config_path.open("r", encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise SchemaError("<document>", f"{config_path}: {exc}") from exc

    if not isinstance(data, dict):
        raise SchemaError("<document>", "Configuration file is invalid: expected a mapping at top level.")
    known = {item.name for item in fields(LabConfig)}
    for key in data:
        if key not in known:
            raise SchemaError(str(key), "unknown configuration key")

    data["log_path"] = _ensure_path_str(data.get("log_path"))
    data["log_level"] = str(data.get("log_level", "INFO")).upper()
    data["workers"] = int(_ensure_float(data.get("workers"), 1.0, 1.0))
    data["beta1_min"] = _ensure_float(data.get("beta1_min"), 1e-6, 0.0)
    data["environment"] = _normalise_section(
        data.get("environment"), "environment", _ENV_FLOATS, _ENV_INTS
    )
    data["training"] = _normalise_training(data.get("training"))
    data["bounds"] = _normalise_section(data.get("bounds"), "bounds", _BOUND_FLOATS, set())
    data["monitor_interval"] = _ensure_float(data.get("monitor_interval"), 1.0, 0.1)
    data["resource_log_path"] = _ensure_path_str(data.get("resource_log_path"))
    data["resource_summary_path"] = _ensure_path_str(data.get("resource_summary_path"))
    data["resource_alerts"] = _normalise_alerts(data.get("resource_alerts"))
    data["alert_cooldown_seconds"] = _ensure_float(
        data.get("alert_cooldown_seconds"), 60.0, 1.0
    )
    return LabConfig(**data)
