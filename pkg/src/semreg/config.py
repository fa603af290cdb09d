"""Flat ``key=value`` configuration files and typed builders.

One namespace covers the scene generator, the feature networks, training,
and the registration pipeline; each builder picks out the keys it knows.
Values are coerced from the dataclass field defaults: booleans accept
true/false, tuples are comma-separated, and ``none`` clears a nullable
field.  Unknown keys are rejected up front so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import os
from collections.abc import Mapping

import numpy as np

from .errors import FormatError, ValidationError
from .geometry import ICPParams, RigidTransform
from .networks import FeatureConfig
from .pipeline import PipelineConfig
from .training import SceneGenConfig, TrainConfig

__all__ = [
    "parse_config",
    "load_config",
    "scene_gen_config",
    "train_config",
    "pipeline_config",
    "feature_config",
    "extrinsic_from",
    "validate_keys",
    "default_config_text",
    "CLI_KEYS",
]

# keys consumed by the command-line driver rather than any dataclass
CLI_KEYS = {
    "num_pairs": "500",  # synthetic training corpus size
    "num_val_pairs": "20",  # held-out pairs scored during training
    "num_eval_pairs": "100",  # synthetic evaluation set size
    "stride": "1",  # manifest frame stride
    "velo_to_cam": "none",  # 12 numbers, sensor-to-pose-frame extrinsic
}

_NULLABLE = {"clip_grad_norm", "category_weights", "velo_to_cam"}


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise FormatError(f"line {line_no}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.split("#", 1)[0].strip()
        if not key:
            raise FormatError(f"line {line_no}: empty key")
        if key in out:
            raise FormatError(f"line {line_no}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str | os.PathLike) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _coerce(key: str, raw: str, default: object) -> object:
    if raw.lower() == "none":
        if key in _NULLABLE:
            return None
        raise ValidationError(f"{key} cannot be none")
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or (default is None and key == "clip_grad_norm"):
            return float(raw)
        if isinstance(default, tuple) or key == "category_weights":
            elem = float if key == "category_weights" else type(default[0])
            return tuple(elem(part.strip()) for part in raw.split(","))
        if isinstance(default, str):
            return raw
    except ValueError as exc:
        raise ValidationError(f"bad value for {key}: {exc}") from exc
    raise ValidationError(f"no coercion rule for key {key!r}")


def _build(cls, mapping: Mapping[str, str], prefix: str = ""):
    defaults = cls()
    kwargs = {}
    for fld in dataclasses.fields(cls):
        key = prefix + fld.name
        if key in mapping:
            kwargs[fld.name] = _coerce(key, mapping[key], getattr(defaults, fld.name))
    return cls(**kwargs)


def scene_gen_config(mapping: Mapping[str, str]) -> SceneGenConfig:
    return _build(SceneGenConfig, mapping)


def train_config(mapping: Mapping[str, str]) -> TrainConfig:
    return _build(TrainConfig, mapping)


def feature_config(mapping: Mapping[str, str]) -> FeatureConfig:
    return _build(FeatureConfig, mapping)


def pipeline_config(mapping: Mapping[str, str]) -> PipelineConfig:
    # icp parameters are flattened with an icp_ prefix
    base = _build(PipelineConfig, mapping)
    icp = _build(ICPParams, mapping, prefix="icp_")
    return dataclasses.replace(base, icp=icp)


def extrinsic_from(mapping: Mapping[str, str]) -> RigidTransform | None:
    """Optional sensor-to-pose-frame extrinsic: 12 numbers, row-major 3x4."""
    raw = mapping.get("velo_to_cam", "none")
    if raw.lower() == "none" or raw == "":
        return None
    parts = raw.split(",")
    if len(parts) != 12:
        raise ValidationError(f"velo_to_cam needs 12 numbers, got {len(parts)}")
    values = np.array([float(p) for p in parts]).reshape(3, 4)
    return RigidTransform(values[:, :3], values[:, 3])


def _known_keys() -> set[str]:
    keys = set(CLI_KEYS)
    for cls in (SceneGenConfig, TrainConfig, FeatureConfig, PipelineConfig):
        keys.update(fld.name for fld in dataclasses.fields(cls))
    keys.discard("icp")  # replaced by the flattened icp_ keys
    keys.update("icp_" + fld.name for fld in dataclasses.fields(ICPParams))
    return keys


def validate_keys(mapping: Mapping[str, str]) -> None:
    """Reject unknown keys with the full known-key list in the message."""
    unknown = sorted(set(mapping) - _known_keys())
    if unknown:
        raise ValidationError(
            f"unknown config keys {unknown}; known keys: {sorted(_known_keys())}"
        )


def _format_value(value: object) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def default_config_text() -> str:
    """A complete config file holding every key at its default value.

    One flat namespace: a key shared by several sections (score_threshold,
    k_shape_points, ...) is emitted once and configures all of its consumers.
    """
    lines = ["# all keys at their defaults; delete lines to keep defaults"]
    seen: dict[str, str] = {}
    for title, cls in (
        ("scene generator", SceneGenConfig),
        ("feature networks", FeatureConfig),
        ("training", TrainConfig),
        ("registration pipeline", PipelineConfig),
    ):
        lines.append(f"\n# {title}")
        instance = cls()
        for fld in dataclasses.fields(cls):
            if fld.name == "icp":
                continue
            value = _format_value(getattr(instance, fld.name))
            if fld.name in seen:
                # a shared key must not hide diverging per-section defaults
                assert seen[fld.name] == value, fld.name
                continue
            seen[fld.name] = value
            lines.append(f"{fld.name}={value}")
    lines.append("\n# icp refinement")
    icp = ICPParams()
    for fld in dataclasses.fields(ICPParams):
        lines.append(f"icp_{fld.name}={_format_value(getattr(icp, fld.name))}")
    lines.append("\n# command-line driver")
    for key, value in CLI_KEYS.items():
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
