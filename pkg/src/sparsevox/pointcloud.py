"""Loading, cropping and voxelizing raw LiDAR point clouds."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CropRange, VoxelizationSpec
from .errors import DimensionError, FormatError, OutOfRangeError, ParseError
from .voxel_hash import SparseVoxelGrid, build_hash, flatten_keys

KITTI_RECORD = 4  # x, y, z, intensity as float32


@dataclass
class PointCloud:
    xyz: np.ndarray  # (P, 3) float64, meters
    feats: np.ndarray | None = None  # (P, F) float64; None means no point features

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if self.feats is None:
            self.feats = np.zeros((self.xyz.shape[0], 0))
        feats = np.asarray(self.feats, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(self.xyz.shape[0], -1)
        if feats.shape[0] != self.xyz.shape[0]:
            raise DimensionError(f"{self.xyz.shape[0]} points but {feats.shape[0]} feature rows")
        self.feats = feats

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def num_feats(self) -> int:
        return self.feats.shape[1]

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.xyz[index], self.feats[index])


def load_points(path, fmt: str = "kitti_bin") -> PointCloud:
    """Read a point cloud from a KITTI ``.bin`` file or a headed CSV file."""
    path = Path(path)
    if fmt == "kitti_bin":
        raw = path.read_bytes()
        record = KITTI_RECORD * 4
        if len(raw) % record:
            raise FormatError(
                f"{path}: {len(raw)} bytes is not a whole number of {record}-byte records"
            )
        arr = np.frombuffer(raw, dtype="<f4").reshape(-1, KITTI_RECORD).astype(np.float64)
        return PointCloud(arr[:, :3], arr[:, 3:])
    if fmt == "csv":
        return _load_csv(path)
    raise ValueError(f"unknown point format {fmt!r}")


def _load_csv(path: Path) -> PointCloud:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: missing header row", row=1)
        names = [h.strip().lower() for h in header]
        if names[:3] != ["x", "y", "z"]:
            raise ParseError(f"{path}: header must start with x,y,z, got {header}", row=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names):
                raise ParseError(f"expected {len(names)} fields, got {len(row)}", row=lineno)
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                bad = next(c for c in row if not _is_float(c))
                raise ParseError(f"non-numeric cell {bad!r}", row=lineno) from None
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, len(names))
    if not np.isfinite(arr).all():
        raise ParseError(f"{path}: non-finite value")
    return PointCloud(arr[:, :3], arr[:, 3:])


def _is_float(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def save_points_bin(cloud: PointCloud, path) -> None:
    """Write KITTI layout; only the first feature channel is kept as intensity."""
    out = np.zeros((len(cloud), KITTI_RECORD), dtype="<f4")
    out[:, :3] = cloud.xyz
    if cloud.num_feats:
        out[:, 3] = cloud.feats[:, 0]
    Path(path).write_bytes(out.tobytes())


def crop_points(cloud: PointCloud, crop: CropRange) -> PointCloud:
    """Keep points with ``min <= p < max`` on every axis, preserving order."""
    lo = np.asarray(crop.min_xyz)
    hi = np.asarray(crop.max_xyz)
    keep = np.all((cloud.xyz >= lo) & (cloud.xyz < hi), axis=1)
    return cloud.subset(keep)


def point_voxel_coords(xyz: np.ndarray, spec: VoxelizationSpec) -> np.ndarray:
    return np.floor(
        (np.asarray(xyz, dtype=np.float64) - np.asarray(spec.origin)) / np.asarray(spec.voxel_size)
    ).astype(np.int64)


def voxelize(cloud: PointCloud, spec: VoxelizationSpec, feature_dim: int, batch: int = 0) -> SparseVoxelGrid:
    """Mean-pool points into voxels.

    Each voxel's feature row holds the mean of its points' features in the
    leading channels, zeros after that, and the point count in the last
    channel. Voxels come out sorted by flattened key.
    """
    if feature_dim < cloud.num_feats + 1:
        raise DimensionError(
            f"feature_dim {feature_dim} cannot hold {cloud.num_feats} point features plus a count"
        )
    coords = point_voxel_coords(cloud.xyz, spec)
    ext = np.asarray(spec.extent)
    outside = np.flatnonzero(~np.all((coords >= 0) & (coords < ext), axis=1))
    if outside.size:
        i = int(outside[0])
        raise OutOfRangeError(
            f"point {i} at {tuple(cloud.xyz[i])} maps to voxel {tuple(coords[i])} "
            f"outside extent {spec.extent}"
        )
    keys = flatten_keys(coords, spec.extent, batch)
    uniq, first, inverse, counts = np.unique(
        keys, return_index=True, return_inverse=True, return_counts=True
    )
    n = uniq.shape[0]

    sums = np.zeros((n, cloud.num_feats), dtype=np.float64)
    np.add.at(sums, inverse, cloud.feats)
    feats = np.zeros((n, feature_dim), dtype=np.float64)
    if n:
        feats[:, : cloud.num_feats] = sums / counts[:, None]
        feats[:, -1] = counts

    vox_coords = coords[first] if n else np.zeros((0, 3), dtype=np.int64)
    return build_hash(vox_coords, feats.astype(np.float32), spec.extent, batch,
                      spec.voxel_size, spec.origin)


def voxel_centers_m(coords, spec_or_grid) -> np.ndarray:
    """Metric centers of integer voxel coords."""
    vs = np.asarray(spec_or_grid.voxel_size, dtype=np.float64)
    org = np.asarray(spec_or_grid.origin, dtype=np.float64)
    return org + (np.asarray(coords, dtype=np.float64) + 0.5) * vs
