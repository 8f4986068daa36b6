"""Pipeline configuration: one JSON document holding every tunable parameter."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, DentAtlasError
from .register.schedule import RegistrationSchedule
from .shape.cpd import CpdConfig
from .volgrid import EnhancementConfig


@dataclass(frozen=True)
class AtlasConfig:
    outer_iterations: int = 10
    shape_update_step: float = 0.25
    channel_weights: tuple = (0.5, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "channel_weights", tuple(float(w) for w in self.channel_weights))
        if self.outer_iterations < 1:
            raise ConfigError("atlas.outer_iterations must be at least 1")
        if not 0 < self.shape_update_step <= 1:
            raise ConfigError("atlas.shape_update_step must lie in (0, 1]")
        w = self.channel_weights
        if len(w) != 2 or min(w) < 0 or abs(sum(w) - 1) > 1e-9:
            raise ConfigError("atlas.channel_weights must be two non-negative numbers summing to 1")


@dataclass(frozen=True)
class ShapeConfig:
    cpd: CpdConfig = field(default_factory=CpdConfig)
    pca_threshold: float = 0.85

    def __post_init__(self):
        if not 0 < self.pca_threshold <= 1:
            raise ConfigError("shape.pca_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class PathsConfig:
    manifest: str | None = None
    output_dir: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    working_spacing: float = 0.4
    workers: int | None = None  # None = all available cores
    enhancement: EnhancementConfig = field(default_factory=EnhancementConfig)
    registration: RegistrationSchedule = field(default_factory=RegistrationSchedule)
    atlas: AtlasConfig = field(default_factory=AtlasConfig)
    shape: ShapeConfig = field(default_factory=ShapeConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if not self.working_spacing > 0:
            raise ConfigError("working_spacing must be positive")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be at least 1 (or null for all cores)")

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def effective_workers(self) -> int:
        from .atlas import default_workers

        return self.workers or default_workers()


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(f"unknown config key {_join(where, key)!r}")
    kwargs = {}
    hints = _nested_types(cls)
    for key, value in data.items():
        sub = hints.get(key)
        kwargs[key] = _build(sub, value, _join(where, key)) if sub is not None else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (DentAtlasError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from None


def _join(where, key):
    return f"{where}.{key}" if where else key


def _nested_types(cls):
    return {
        PipelineConfig: {"enhancement": EnhancementConfig, "registration": RegistrationSchedule,
                         "atlas": AtlasConfig, "shape": ShapeConfig, "paths": PathsConfig},
        ShapeConfig: {"cpd": CpdConfig},
    }.get(cls, {})


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)


def default_config() -> PipelineConfig:
    return PipelineConfig()
