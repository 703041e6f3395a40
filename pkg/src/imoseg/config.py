"""Pipeline configuration read from a TOML key-value file.

Every key is optional and falls back to its default.  Unknown sections or
keys are rejected, as are values of the wrong type or outside their range.
Environment variables of the form ``IMOSEG_<SECTION>__<KEY>`` override the
file, e.g. ``IMOSEG_RANSAC__MAX_ITERATIONS=500``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .egomotion import RansacConfig
from .geometry import CameraIntrinsics, GeometryError

ENV_PREFIX = "IMOSEG_"


class ConfigError(ValueError):
    pass


class UnknownKeyError(ConfigError):
    pass


class ConfigTypeError(ConfigError):
    pass


class ConfigRangeError(ConfigError):
    pass


@dataclass(frozen=True)
class LabelerConfig:
    clip_value: float = 10.0
    bins: int = 256
    eps_total_var: float = 4.0
    eps_separation: float = 0.25
    total_variance_comparator: str = "greater"
    morph_radius: int = 1


@dataclass(frozen=True)
class EventsConfig:
    bins: int = 15
    period: float = 0.025


@dataclass(frozen=True)
class DepthConfig:
    z_max: float = 3.0


@dataclass(frozen=True)
class RuntimeConfig:
    workers: int = 1
    detection_iou: float = 0.3


@dataclass(frozen=True)
class PipelineConfig:
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics.desk)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    labeler: LabelerConfig = field(default_factory=LabelerConfig)
    events: EventsConfig = field(default_factory=EventsConfig)
    depth: DepthConfig = field(default_factory=DepthConfig)
    pipeline: RuntimeConfig = field(default_factory=RuntimeConfig)


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _open_unit(v):
    return 0 < v < 1


def _unit(v):
    return 0 <= v <= 1


_RANGES = {
    ("intrinsics", "fx"): _positive,
    ("intrinsics", "fy"): _positive,
    ("intrinsics", "width"): _positive,
    ("intrinsics", "height"): _positive,
    ("ransac", "max_iterations"): lambda v: v >= 1,
    ("ransac", "stop_probability"): _open_unit,
    ("ransac", "sample_size"): lambda v: v >= 3,
    ("ransac", "inlier_threshold"): _positive,
    ("ransac", "min_inlier_fraction"): _unit,
    ("ransac", "rng_seed"): _nonneg,
    ("ransac", "max_eval_pixels"): lambda v: v >= 3,
    ("ransac", "max_condition"): _positive,
    ("ransac", "refine_rounds"): lambda v: v >= 1,
    ("labeler", "clip_value"): _positive,
    ("labeler", "bins"): lambda v: v >= 2,
    ("labeler", "eps_total_var"): _nonneg,
    ("labeler", "eps_separation"): _nonneg,
    ("labeler", "total_variance_comparator"): lambda v: v in ("greater", "less"),
    ("labeler", "morph_radius"): _nonneg,
    ("events", "bins"): lambda v: v >= 1,
    ("events", "period"): _positive,
    ("depth", "z_max"): _positive,
    ("pipeline", "workers"): lambda v: v >= 1,
    ("pipeline", "detection_iou"): _open_unit,
}


def _section_types():
    return {f.name: f.default_factory for f in dataclasses.fields(PipelineConfig)}


def _check_value(key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        expected = "bool"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        expected = "int"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        expected = "float"
        if ok:
            value = float(value)
            ok = math.isfinite(value)
    else:
        ok = isinstance(value, str)
        expected = "string"
    if not ok:
        raise ConfigTypeError(f"{key}: expected {expected}, got {value!r}")
    return value


def _flatten(data: dict, prefix=""):
    for k, v in data.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def _parse_env_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def env_overrides(environ) -> dict:
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX) :].lower().split("__")
        if len(parts) != 2:
            raise UnknownKeyError(f"{name}: expected {ENV_PREFIX}<SECTION>__<KEY>")
        out[f"{parts[0]}.{parts[1]}"] = _parse_env_value(raw)
    return out


def config_from_dict(data: dict, overrides: dict | None = None) -> PipelineConfig:
    values = dict(_flatten(data))
    values.update(overrides or {})
    sections = _section_types()
    grouped: dict[str, dict] = {name: {} for name in sections}
    for key, value in values.items():
        section, _, name = key.partition(".")
        if section not in sections or not name or "." in name:
            raise UnknownKeyError(f"unknown key {key!r}")
        defaults = sections[section]()
        if name not in {f.name for f in dataclasses.fields(defaults)}:
            raise UnknownKeyError(f"unknown key {key!r}")
        value = _check_value(key, value, getattr(defaults, name))
        check = _RANGES.get((section, name))
        if check is not None and not check(value):
            raise ConfigRangeError(f"{key}: value {value!r} out of range")
        grouped[section][name] = value
    built = {}
    for section, factory in sections.items():
        try:
            built[section] = dataclasses.replace(factory(), **grouped[section])
        except (ValueError, GeometryError) as exc:
            raise ConfigRangeError(f"{section}: {exc}") from None
    return PipelineConfig(**built)


def parse_config(text: str, environ=None) -> PipelineConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    return config_from_dict(data, env_overrides(environ or {}))


def load_config(path=None, environ=None) -> PipelineConfig:
    """Read a config file (or only defaults and environment when ``path`` is None)."""
    text = Path(path).read_text() if path is not None else ""
    return parse_config(text, environ)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return {f.name: dataclasses.asdict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
