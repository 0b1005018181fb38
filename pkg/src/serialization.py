"""File formats of the lab.

JSON floats use Python's shortest round-trip repr, CSV floats 17 significant
digits; both reload bit-exactly. Every writer produces byte-identical output
for identical inputs.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import DivergenceKind, DivergenceTag, PromptDist, RewardTable, SoftmaxPolicy
from .errors import SchemaError
from .losses import AlgorithmSpec, Family
from .synth_env import Dataset, Environment
from .trainer import TRACE_HEADER, TrainTrace

SPEC_FIELDS = (
    "family",
    "beta",
    "beta1",
    "variance",
    "divergence",
    "gamma",
    "lambda1",
    "lambda2",
    "delta_max",
    "name",
)


def format_float(value: float) -> str:
    return format(float(value), ".17g")


def _format_cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    if value is None:
        return ""
    return str(value)


def write_text(path: str | Path, text: str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)
    return target


def dumps_json(document: Any) -> str:
    return json.dumps(document, indent=2, allow_nan=True) + "\n"


def write_json(path: str | Path, document: Any) -> Path:
    return write_text(path, dumps_json(document))


def read_json(path: str | Path) -> Any:
    with Path(path).open("r", encoding="utf-8") as handle:
        try:
            return json.load(handle)
        except json.JSONDecodeError as exc:
            raise SchemaError("<document>", f"{path}: not valid JSON ({exc})") from exc


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format_cell(value) for value in row])
    return buffer.getvalue()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    return write_text(path, csv_text(header, rows))


def _require(document: Mapping[str, Any], key: str) -> Any:
    if not isinstance(document, Mapping):
        raise SchemaError("<document>", "expected a JSON object")
    if key not in document:
        raise SchemaError(key, "missing field")
    return document[key]


def _float_array(document: Mapping[str, Any], key: str, ndim: int) -> np.ndarray:
    try:
        arr = np.asarray(_require(document, key), dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(key, f"expected numbers ({exc})") from exc
    if arr.ndim != ndim:
        raise SchemaError(key, f"expected a {ndim}-dimensional array")
    return arr


# Environment --------------------------------------------------------------


def environment_to_dict(env: Environment) -> dict[str, Any]:
    return {
        "kind": "environment",
        "nu0": env.nu0.weights.tolist(),
        "r_star": {
            "values": env.r_star.values.tolist(),
            "r_min": env.r_star.r_min,
            "r_max": env.r_star.r_max,
        },
        "pi_data_logits": env.pi_data.logits.tolist(),
        "pi_ref_logits": env.pi_ref.logits.tolist(),
    }


def environment_from_dict(document: Mapping[str, Any]) -> Environment:
    reward = _require(document, "r_star")
    try:
        r_min = float(_require(reward, "r_min"))
        r_max = float(_require(reward, "r_max"))
    except (TypeError, ValueError) as exc:
        raise SchemaError("r_star", str(exc)) from exc
    return Environment(
        PromptDist(_float_array(document, "nu0", 1)),
        RewardTable(_float_array(reward, "values", 2), r_min, r_max),
        SoftmaxPolicy(_float_array(document, "pi_data_logits", 2)),
        SoftmaxPolicy(_float_array(document, "pi_ref_logits", 2)),
    )


def save_environment(env: Environment, path: str | Path) -> Path:
    return write_json(path, environment_to_dict(env))


def load_environment(path: str | Path) -> Environment:
    return environment_from_dict(read_json(path))


# Dataset ------------------------------------------------------------------


def dataset_text(ds: Dataset) -> str:
    lines = [json.dumps({"kind": "dataset", "seed": ds.seed, "size": len(ds)})]
    for example in ds:
        lines.append(
            json.dumps(
                {
                    "prompt": example.prompt,
                    "chosen": example.chosen,
                    "rejected": example.rejected,
                    "z": example.z,
                    "rating_gap": example.rating_gap,
                }
            )
        )
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path: str | Path) -> Path:
    return write_text(path, dataset_text(ds))


def load_dataset(path: str | Path) -> Dataset:
    with Path(path).open("r", encoding="utf-8") as handle:
        lines = [line for line in handle.read().splitlines() if line.strip()]
    if not lines:
        raise SchemaError("<header>", f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as exc:
        raise SchemaError("<line>", f"{path}: malformed JSON line ({exc})") from exc
    if not isinstance(header, Mapping) or header.get("kind") != "dataset":
        raise SchemaError("kind", "first line must be the dataset header")

    columns: dict[str, list[Any]] = {key: [] for key in ("prompt", "chosen", "rejected", "z")}
    gaps: list[float] = []
    for record in records:
        for key, column in columns.items():
            value = _require(record, key)
            if not isinstance(value, int) or isinstance(value, bool):
                raise SchemaError(key, f"expected an integer, got {value!r}")
            column.append(value)
        gap = record.get("rating_gap")
        if gap is not None and not isinstance(gap, (int, float)):
            raise SchemaError("rating_gap", f"expected a number or null, got {gap!r}")
        gaps.append(math.nan if gap is None else float(gap))
    if "size" in header and header["size"] != len(records):
        raise SchemaError("size", f"header announces {header['size']} records, found {len(records)}")
    return Dataset(
        np.array(columns["prompt"], dtype=np.int64),
        np.array(columns["chosen"], dtype=np.int64),
        np.array(columns["rejected"], dtype=np.int64),
        np.array(columns["z"], dtype=np.int8),
        np.array(gaps, dtype=float),
        header.get("seed"),
    )


# Policy -------------------------------------------------------------------


def save_policy(policy: SoftmaxPolicy, path: str | Path) -> Path:
    return write_json(path, {"kind": "policy", "logits": policy.logits.tolist()})


def load_policy(path: str | Path) -> SoftmaxPolicy:
    return SoftmaxPolicy(_float_array(read_json(path), "logits", 2))


# AlgorithmSpec ------------------------------------------------------------


def spec_to_dict(spec: AlgorithmSpec) -> dict[str, Any]:
    return {
        "family": spec.family.value,
        "beta": spec.beta,
        "beta1": spec.beta1,
        "variance": spec.variance,
        "divergence": spec.divergence.tag.value,
        "gamma": spec.divergence.gamma,
        "lambda1": spec.lambda1,
        "lambda2": spec.lambda2,
        "delta_max": spec.delta_max,
        "name": spec.name,
    }


def _number(document: Mapping[str, Any], key: str) -> float:
    value = document[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(key, f"expected a number, got {value!r}")
    return float(value)


def spec_from_dict(document: Mapping[str, Any]) -> AlgorithmSpec:
    """Build an :class:`AlgorithmSpec` from its flat JSON form.

    Only ``family`` is required. Unknown fields are rejected by name.
    """

    if not isinstance(document, Mapping):
        raise SchemaError("<document>", "algorithm spec must be a JSON object")
    for key in document:
        if key not in SPEC_FIELDS:
            raise SchemaError(str(key), "unknown algorithm spec field")
    family_name = _require(document, "family")
    try:
        family = Family(str(family_name).upper())
    except ValueError as exc:
        raise SchemaError("family", f"unknown loss family {family_name!r}") from exc

    kwargs: dict[str, Any] = {}
    for key in ("beta", "beta1", "variance", "lambda1", "lambda2", "delta_max"):
        if key in document:
            kwargs[key] = _number(document, key)
    if "name" in document:
        kwargs["name"] = str(document["name"])

    tag_name = document.get("divergence", DivergenceTag.KL.value)
    try:
        tag = DivergenceTag(str(tag_name).upper())
    except ValueError as exc:
        raise SchemaError("divergence", f"unknown divergence {tag_name!r}") from exc
    if tag is DivergenceTag.KL_PLUS_GAMMA_CHI2:
        gamma = _number(document, "gamma") if "gamma" in document else 0.0
        kwargs["divergence"] = DivergenceKind.mixed(gamma)
    else:
        kwargs["divergence"] = DivergenceKind(tag)
    return AlgorithmSpec(family, **kwargs)


def load_spec(source: str | Path) -> AlgorithmSpec:
    """Read a spec from a JSON file path or an inline JSON object."""

    text = str(source).strip()
    if text.startswith("{"):
        try:
            return spec_from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise SchemaError("<document>", f"inline spec is not valid JSON ({exc})") from exc
    return spec_from_dict(read_json(source))


# Trace --------------------------------------------------------------------


def trace_text(trace: TrainTrace) -> str:
    return csv_text(TRACE_HEADER, (record.as_row() for record in trace.records))


def write_trace_csv(trace: TrainTrace, path: str | Path) -> Path:
    return write_text(path, trace_text(trace))


def read_csv_rows(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))
