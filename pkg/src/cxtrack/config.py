"""Flat run configuration: ``key = <json value>`` lines, one file per run.

Unknown keys are rejected. Every key has a documented default; choosing a
``data.preset`` overlays preset values onto keys the file does not set
itself, so one file fully determines a run. ``dump_config`` and
``parse_config`` round-trip exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Optional

from .synth import PRESETS, SceneSpec

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "parse_config",
    "load_config",
    "dump_config",
    "save_config",
    "scene_spec_from_config",
]


class ConfigError(ValueError):
    """Bad key, bad type or unparsable config text."""


# key -> (default, allowed python types, optional allowed values)
_SCHEMA: Dict[str, tuple] = {
    "seed": (0, int, None),
    "transformer.variant": ("semi_dropout", str, ("vanilla", "semi_dropout", "gated")),
    "transformer.layers": (4, int, None),
    "transformer.heads": (2, int, None),
    "transformer.model_dim": (32, int, None),
    "transformer.key_dim": (16, int, None),
    "transformer.value_dim": (16, int, None),
    "transformer.ffn_dim": (64, int, None),
    "transformer.dropout": (0.1, float, None),
    "backbone.k": (8, int, None),
    "backbone.budget": (128, (int, type(None)), None),
    "xrpn.radius": (0.3, float, None),
    "xrpn.sigma2_init": (10.0, float, None),
    "xrpn.sigma_learnable": (False, bool, None),
    "xrpn.center_embedding": ("on", str, ("on", "off")),
    "loss.rigidity": ("non_rigid", str, ("rigid", "non_rigid")),
    "loss.gamma1": (None, (float, type(None)), None),
    "loss.gamma2": (None, (float, type(None)), None),
    "loss.gamma3": (None, (float, type(None)), None),
    "loss.huber_delta": (1.0, float, None),
    "pipeline.context": ("on", str, ("on", "off")),
    "train.steps": (500, int, None),
    "train.step_size": (1e-3, float, None),
    "train.prev_box_noise": (0.0, float, None),
    "train.prev_box_yaw_noise": (0.0, float, None),
    "data.preset": ("pedestrian_like", str, tuple(PRESETS) + ("none",)),
    "data.sequences": (8, int, None),
    "data.frames": (12, int, None),
    "data.size": ([0.6, 0.8, 1.7], list, None),
    "data.points_per_object": (64, int, None),
    "data.trans_bound": ([0.12, 0.12, 0.02], list, None),
    "data.yaw_bound": (0.06, float, None),
    "data.distractors": (2, int, None),
    "data.distractor_offset": ([1.5, 3.0], list, None),
    "data.clutter": (32, int, None),
    "data.clutter_extent": (4.0, float, None),
    "data.occlusion_drop": (0.2, float, None),
}

DEFAULTS: Dict[str, Any] = {k: v[0] for k, v in _SCHEMA.items()}


def _coerce(key: str, value: Any) -> Any:
    default, types, choices = _SCHEMA[key]
    if isinstance(types, tuple):
        ok = isinstance(value, types) and not (isinstance(value, bool) and bool not in types)
    else:
        ok = isinstance(value, types) and not (isinstance(value, bool) and types is not bool)
    # json has no int/float distinction worth fighting over
    if not ok and types is float and isinstance(value, int) and not isinstance(value, bool):
        value, ok = float(value), True
    if not ok and isinstance(types, tuple) and float in types and isinstance(value, int) \
            and not isinstance(value, bool):
        value, ok = float(value), True
    if not ok:
        raise ConfigError(f"{key}: expected {types}, got {type(value).__name__} ({value!r})")
    if choices is not None and value not in choices:
        raise ConfigError(f"{key}: must be one of {choices}, got {value!r}")
    return value


def parse_config(text: str, apply_preset: bool = True) -> Dict[str, Any]:
    """Parse config text into a full key->value dict (defaults filled in)."""
    explicit: Dict[str, Any] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line!r}")
        key, _, rhs = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in explicit:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        try:
            value = json.loads(rhs.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {line_no}: bad JSON value for {key}: {exc}") from None
        explicit[key] = _coerce(key, value)

    cfg = dict(DEFAULTS)
    preset = explicit.get("data.preset", cfg["data.preset"])
    if apply_preset and preset != "none":
        for k, v in PRESETS[preset].items():
            cfg[k] = v
    cfg.update(explicit)
    return cfg


def load_config(path) -> Dict[str, Any]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: Dict[str, Any]) -> str:
    """Serialize every key, sorted, one JSON value per line."""
    unknown = set(cfg) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    lines = [f"{k} = {json.dumps(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def save_config(path, cfg: Dict[str, Any]) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


def scene_spec_from_config(cfg: Dict[str, Any], seed: Optional[int] = None,
                           frames: Optional[int] = None,
                           occlusion_drop: Optional[float] = None) -> SceneSpec:
    """Build a generator spec from the data.* keys, with optional overrides."""
    return SceneSpec(
        seed=cfg["seed"] if seed is None else seed,
        frames=cfg["data.frames"] if frames is None else frames,
        size=tuple(cfg["data.size"]),
        points_per_object=cfg["data.points_per_object"],
        trans_bound=tuple(cfg["data.trans_bound"]),
        yaw_bound=cfg["data.yaw_bound"],
        distractors=cfg["data.distractors"],
        distractor_offset=tuple(cfg["data.distractor_offset"]),
        clutter=cfg["data.clutter"],
        clutter_extent=cfg["data.clutter_extent"],
        occlusion_drop=cfg["data.occlusion_drop"] if occlusion_drop is None else occlusion_drop,
    )
