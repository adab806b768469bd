"""Pipeline configuration: voxelization presets, window layout, sampling caps."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError

Triple = tuple[int, int, int]

# Interval-sampling axes used by default for each chessboard rate.
CBS_DEFAULT_AXES = {"1/2": "x", "1/4": "xy", "1/8": "xyz"}
CBS_RATES = ("off", "1/2", "1/4", "1/8")


@dataclass(frozen=True)
class CropRange:
    min_xyz: tuple[float, float, float]
    max_xyz: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min_xyz)
        hi = tuple(float(v) for v in self.max_xyz)
        if len(lo) != 3 or len(hi) != 3:
            raise ConfigError("crop range needs three components per bound")
        if not all(a < b for a, b in zip(lo, hi)):
            raise ConfigError(f"crop range min {lo} must be < max {hi} componentwise")
        object.__setattr__(self, "min_xyz", lo)
        object.__setattr__(self, "max_xyz", hi)


@dataclass(frozen=True)
class VoxelizationSpec:
    """Regular grid geometry.

    ``origin`` is the metric position of the grid corner, so voxel ``i`` along
    an axis spans ``[origin + i * size, origin + (i + 1) * size)``.
    """

    voxel_size: tuple[float, float, float]
    origin: tuple[float, float, float]
    extent: Triple

    def __post_init__(self):
        vs = tuple(float(v) for v in self.voxel_size)
        org = tuple(float(v) for v in self.origin)
        ext = tuple(int(v) for v in self.extent)
        if len(vs) != 3 or len(org) != 3 or len(ext) != 3:
            raise ConfigError("voxelization spec needs 3 components per field")
        if not all(v > 0 for v in vs):
            raise ConfigError(f"voxel size must be positive, got {vs}")
        if not all(e >= 1 for e in ext):
            raise ConfigError(f"extent must be >= 1 per axis, got {ext}")
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "origin", org)
        object.__setattr__(self, "extent", ext)

    @classmethod
    def from_range(cls, voxel_size, crop: CropRange) -> "VoxelizationSpec":
        extent = []
        for lo, hi, vs in zip(crop.min_xyz, crop.max_xyz, voxel_size):
            # 1e-6 absorbs float noise such as 150.4 / 0.4 = 376.00000000000006
            extent.append(max(1, math.ceil((hi - lo) / vs - 1e-6)))
        return cls(tuple(voxel_size), crop.min_xyz, tuple(extent))

    @property
    def crop_range(self) -> CropRange:
        hi = tuple(o + e * v for o, e, v in zip(self.origin, self.extent, self.voxel_size))
        return CropRange(self.origin, hi)


PRESETS = {
    "waymo": ((0.4, 0.4, 0.6), CropRange((-75.2, -75.2, -2.0), (75.2, 75.2, 4.0))),
    "kitti": ((0.32, 0.32, 0.4), CropRange((0.0, -40.0, -3.0), (70.4, 40.0, 1.0))),
}


def preset(name: str) -> tuple[VoxelizationSpec, CropRange]:
    """Voxelization spec and crop range for a named dataset preset."""
    try:
        voxel_size, crop = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return VoxelizationSpec.from_range(voxel_size, crop), crop


def parse_rate(rate) -> Fraction | None:
    """Parse a chessboard sampling rate; ``None`` means sampling is off."""
    if rate is None:
        return None
    text = str(rate).strip().lower()
    if text in ("off", "none", "1", "1/1"):
        return None
    if text not in CBS_RATES:
        raise ConfigError(f"unsupported chessboard rate {rate!r}; choose from {CBS_RATES}")
    return Fraction(text)


@dataclass(frozen=True)
class VoteConfig:
    hidden: int = 64
    threshold: float = 0.5
    merge: str = "replace"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.merge not in ("replace", "mean"):
            raise ConfigError(f"merge rule must be 'replace' or 'mean', got {self.merge!r}")
        if self.hidden < 1:
            raise ConfigError("vote MLP hidden width must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the voxel transformer pipeline.

    ``num_keys`` and ``max_gather`` accept ``None`` for "no cap".
    """

    channels: int = 64
    num_blocks: int = 4
    query_window: Triple = (3, 3, 5)
    key_windows: tuple[Triple, ...] = ((3, 3, 5), (7, 7, 7))
    heads_per_group: tuple[int, ...] = (4, 4)
    num_keys: int | None = 32
    max_gather: int | None = 512
    cbs_rate: str = "1/4"
    cbs_axes: str | None = None
    knn_k: int = 3
    ffn_hidden: int | None = None
    ln_eps: float = 1e-5
    chunk_windows: int = 64
    voxelization: VoxelizationSpec = field(default_factory=lambda: preset("waymo")[0])
    vote: VoteConfig = field(default_factory=VoteConfig)

    def __post_init__(self):
        object.__setattr__(self, "query_window", _triple(self.query_window, "query_window"))
        kws = tuple(_triple(k, "key_windows") for k in self.key_windows)
        object.__setattr__(self, "key_windows", kws)
        object.__setattr__(self, "heads_per_group", tuple(int(h) for h in self.heads_per_group))
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be >= 0")
        if not kws:
            raise ConfigError("at least one key window is required")
        if len(self.heads_per_group) != len(kws):
            raise ConfigError(
                f"{len(kws)} key windows need {len(kws)} head groups, "
                f"got heads_per_group={self.heads_per_group}"
            )
        for small, large in zip(kws, kws[1:]):
            if any(a > b for a, b in zip(small, large)):
                raise ConfigError(f"key windows must be ordered small to large: {kws}")
        if any(q > r for q, r in zip(self.query_window, self.rpe_extent)):
            raise ConfigError("query window may not exceed the largest key window")
        if self.channels % len(kws):
            raise ConfigError(f"channels {self.channels} not divisible by {len(kws)} head groups")
        width = self.channels // len(kws)
        for h in self.heads_per_group:
            if h < 1 or width % h:
                raise ConfigError(f"group width {width} not divisible by {h} heads")
        for name in ("num_keys", "max_gather"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1 or null")
        parse_rate(self.cbs_rate)
        if self.cbs_axes is not None and not set(self.cbs_axes) <= set("xyz"):
            raise ConfigError(f"cbs_axes must be drawn from 'xyz', got {self.cbs_axes!r}")
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")
        if self.chunk_windows < 1:
            raise ConfigError("chunk_windows must be >= 1")

    @property
    def num_groups(self) -> int:
        return len(self.key_windows)

    @property
    def group_width(self) -> int:
        return self.channels // self.num_groups

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or 2 * self.channels

    @property
    def rpe_extent(self) -> Triple:
        """Componentwise largest key window, which sizes the position tables."""
        return tuple(int(v) for v in np.max(np.array(self.key_windows), axis=0))

    def pillar_config(self) -> "PipelineConfig":
        """Config of the vertical compression block: (1, 1, extent_z) windows."""
        pillar = (1, 1, self.voxelization.extent[2])
        return self.replace(
            query_window=pillar,
            key_windows=(pillar,) * self.num_groups,
            cbs_rate="off",
        )

    def replace(self, **changes) -> "PipelineConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return PipelineConfig(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if isinstance(data.get("voxelization"), dict):
            data["voxelization"] = VoxelizationSpec(**data["voxelization"])
        if isinstance(data.get("vote"), dict):
            data["vote"] = VoteConfig(**data["vote"])
        if "key_windows" in data:
            data["key_windows"] = tuple(tuple(k) for k in data["key_windows"])
        return cls(**data)


def _triple(value, name) -> Triple:
    t = tuple(int(v) for v in value)
    if len(t) != 3 or any(v < 1 for v in t):
        raise ConfigError(f"{name} entries must be three positive integers, got {value!r}")
    return t


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return PipelineConfig.from_dict(data)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
