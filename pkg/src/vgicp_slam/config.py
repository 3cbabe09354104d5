"""Pipeline configuration: one home for every tunable parameter."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .optimizer import LMSettings


class ConfigError(ValueError):
    pass


@dataclass
class LocalMappingConfig:
    skip_overlap: float = 0.95  # th^L_max
    min_overlap: float = 0.10  # th^L_min
    max_frames: int = 20  # N^L_max
    resolution: float = 0.5  # r^L


@dataclass
class GlobalMappingConfig:
    min_overlap: float = 0.025  # th^G_min
    resolution: float = 0.5  # r^G
    schedule: str = "incremental"  # incremental | batch
    symmetric_factors: bool = False


@dataclass
class PreprocessConfig:
    k_neighbors: int = 10
    plane_epsilon: float = 1e-3
    scan_downsample: float = 0.0
    submap_downsample: float = 0.0


@dataclass
class KernelConfig:
    tukey_width: float = 1.0
    tukey_offset: float = 1.0
    huber_delta: float = 1.0


@dataclass
class LoopConfig:
    enabled: bool = True
    proximity: bool = True
    radius: float = 20.0
    min_id_gap: int = 5
    min_overlap: float = 0.3
    max_mean_error: float = 0.5
    information: list[float] = field(default_factory=lambda: [100.0, 100.0, 100.0, 25.0, 25.0, 25.0])


@dataclass
class GicpConfig:
    max_iterations: int = 64
    max_correspondence_distance: float = 2.0
    tolerance: float = 1e-6


@dataclass
class EvaluationConfig:
    mme_radius: float = 0.5
    mme_min_neighbors: int = 5
    mme_stride: int = 4  # evaluate every n-th map point


@dataclass
class PipelineConfig:
    local: LocalMappingConfig = field(default_factory=LocalMappingConfig)
    global_: GlobalMappingConfig = field(default_factory=GlobalMappingConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    gicp: GicpConfig = field(default_factory=GicpConfig)
    optimizer: LMSettings = field(default_factory=LMSettings)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    odometry: str = "file"  # file | gicp
    deterministic: bool = True
    threads: int = 8

    def validate(self) -> "PipelineConfig":
        g, lo = self.global_, self.local
        if not (0 < g.min_overlap < lo.min_overlap < lo.skip_overlap <= 1):
            raise ConfigError(
                "thresholds must satisfy 0 < global.min_overlap < local.min_overlap < local.skip_overlap <= 1"
            )
        if lo.resolution <= 0 or g.resolution <= 0:
            raise ConfigError("voxel resolutions must be positive")
        if lo.max_frames < 2:
            raise ConfigError("local.max_frames must be at least 2")
        if g.schedule not in ("incremental", "batch"):
            raise ConfigError(f"unknown schedule {g.schedule!r}")
        if self.odometry not in ("file", "gicp"):
            raise ConfigError(f"unknown odometry source {self.odometry!r}")
        if self.preprocess.k_neighbors < 4:
            raise ConfigError("preprocess.k_neighbors must be at least 4")
        if self.kernel.tukey_width <= 0 or self.kernel.tukey_offset < 0 or self.kernel.huber_delta <= 0:
            raise ConfigError("kernel parameters out of range")
        if len(self.loop.information) != 6:
            raise ConfigError("loop.information must list 6 diagonal entries")
        if self.evaluation.mme_radius <= 0 or self.evaluation.mme_stride < 1:
            raise ConfigError("evaluation parameters out of range")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            key = f.name.rstrip("_")
            out[key] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
        return out

    @classmethod
    def from_dict(cls, data: dict | None) -> "PipelineConfig":
        data = dict(data or {})
        cfg = cls()
        names = {f.name.rstrip("_"): f.name for f in fields(cls)}
        for key, value in data.items():
            if key not in names:
                raise ConfigError(f"unknown config section {key!r}")
            attr = names[key]
            current = getattr(cfg, attr)
            if dataclasses.is_dataclass(current):
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be a mapping")
                allowed = {f.name for f in fields(current)}
                unknown = set(value) - allowed
                if unknown:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
                setattr(cfg, attr, dataclasses.replace(current, **value))
            else:
                setattr(cfg, attr, value)
        return cfg.validate()

    def override(self, dotted: dict[str, Any]) -> "PipelineConfig":
        """Apply ``{"section.key": value}`` overrides, returning a new config."""
        data = self.to_dict()
        for path, value in dotted.items():
            parts = path.split(".")
            node = data
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config path {path!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config path {path!r}")
            node[parts[-1]] = value
        return PipelineConfig.from_dict(data)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig().validate()
    with open(path) as fh:
        return PipelineConfig.from_dict(yaml.safe_load(fh))


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
