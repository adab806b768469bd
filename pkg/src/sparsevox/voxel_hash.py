"""Open-addressed spatial hash over non-empty voxels.

Keys are flattened voxel coordinates ``b*X*Y*Z + x*Y*Z + y*Z + z``. A key is
placed at ``key mod capacity`` and collisions walk forward one slot at a time
(linear probing with wraparound). Capacity is the smallest power of two that
is at least twice the voxel count, so the load factor never exceeds 0.5.

The table is built once and is read-only afterwards, which makes lookups and
gathers safe to share between threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, DuplicateVoxelError, FormatError, OutOfRangeError

EMPTY = -1
KEY_LIMIT = 2**63

GRID_MAGIC = b"SVXG"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sHI3I3d3dQI")


def _check_extent(extent, batch: int = 0) -> tuple[int, int, int]:
    ext = tuple(int(e) for e in extent)
    if len(ext) != 3 or min(ext) < 1:
        raise OutOfRangeError(f"invalid extent {extent!r}")
    if (batch + 1) * ext[0] * ext[1] * ext[2] > KEY_LIMIT:
        raise OutOfRangeError(f"extent {ext} with batch {batch} overflows 63-bit keys")
    return ext


def in_extent(coords: np.ndarray, extent) -> np.ndarray:
    coords = np.asarray(coords)
    ext = np.asarray(extent, dtype=np.int64)
    return np.all((coords >= 0) & (coords < ext), axis=-1)


def flatten_keys(coords, extent, batch: int = 0) -> np.ndarray:
    """Vectorized flattened key of ``(..., 3)`` coords; raises on out-of-extent input."""
    x_max, y_max, z_max = _check_extent(extent, batch)
    coords = np.asarray(coords, dtype=np.int64)
    if coords.shape[-1:] != (3,):
        raise DimensionError(f"coords must have trailing dimension 3, got {coords.shape}")
    if batch < 0:
        raise OutOfRangeError(f"batch index must be non-negative, got {batch}")
    bad = ~in_extent(coords, (x_max, y_max, z_max))
    if bad.any():
        first = tuple(int(v) for v in coords.reshape(-1, 3)[np.flatnonzero(bad.reshape(-1))[0]])
        raise OutOfRangeError(f"coord {first} outside extent {(x_max, y_max, z_max)}")
    base = batch * x_max * y_max * z_max
    return base + (coords[..., 0] * y_max + coords[..., 1]) * z_max + coords[..., 2]


def flatten_key(coord, extent, batch: int = 0) -> int:
    """Flattened key of a single ``(x, y, z)`` coord."""
    return int(flatten_keys(np.asarray(coord)[None], extent, batch)[0])


def _capacity_for(n: int) -> int:
    need = max(1, 2 * n)
    return 1 << (need - 1).bit_length()


@dataclass(eq=False)
class SparseVoxelGrid:
    """Non-empty voxels of one sample plus the hash table indexing them.

    Build with :func:`build_hash`; the constructor does not validate.
    """

    extent: tuple[int, int, int]
    coords: np.ndarray  # (N, 3) int64
    features: np.ndarray  # (N, C) float32
    batch: int = 0
    voxel_size: tuple[float, float, float] | None = None
    origin: tuple[float, float, float] | None = None
    slot_keys: np.ndarray = field(default=None, repr=False)
    slot_values: np.ndarray = field(default=None, repr=False)

    @property
    def num_voxels(self) -> int:
        return int(self.coords.shape[0])

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])

    @property
    def capacity(self) -> int:
        return int(self.slot_keys.shape[0])

    def keys(self) -> np.ndarray:
        return flatten_keys(self.coords, self.extent, self.batch)

    def with_features(self, features: np.ndarray) -> "SparseVoxelGrid":
        """Same coords and table, new feature matrix."""
        features = np.asarray(features, dtype=np.float32)
        if features.shape[0] != self.num_voxels:
            raise DimensionError(f"expected {self.num_voxels} feature rows, got {features.shape[0]}")
        return SparseVoxelGrid(
            self.extent, self.coords, features, self.batch,
            self.voxel_size, self.origin, self.slot_keys, self.slot_values,
        )


def build_hash(
    coords,
    features,
    extent,
    batch: int = 0,
    voxel_size=None,
    origin=None,
) -> SparseVoxelGrid:
    """Index unique in-extent voxel coords in a fresh open-addressed table.

    Insertion runs in vectorized rounds: every pending key tries its current
    slot, the lowest voxel index wins each free slot, and the rest advance by
    one. A key therefore only ever passes slots that are already occupied,
    which is the invariant linear-probing lookups rely on.
    """
    extent = _check_extent(extent, batch)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[0] != coords.shape[0]:
        raise DimensionError(
            f"features must be (N, C) with N={coords.shape[0]}, got {features.shape}"
        )
    keys = flatten_keys(coords, extent, batch)
    n = keys.shape[0]

    uniq, first, counts = np.unique(keys, return_index=True, return_counts=True)
    if uniq.shape[0] != n:
        dup = tuple(int(v) for v in coords[first[np.argmax(counts > 1)]])
        raise DuplicateVoxelError(f"duplicate voxel coord {dup}")

    capacity = _capacity_for(n)
    mask = capacity - 1
    slot_keys = np.full(capacity, EMPTY, dtype=np.int64)
    slot_values = np.full(capacity, EMPTY, dtype=np.int64)

    pending = np.arange(n, dtype=np.int64)
    pos = keys & mask
    while pending.size:
        free = slot_keys[pos] == EMPTY
        # lowest pending index wins a contested free slot
        cand_pos = pos[free]
        _, win = np.unique(cand_pos, return_index=True)
        winners = np.flatnonzero(free)[win]
        slot_keys[pos[winners]] = keys[pending[winners]]
        slot_values[pos[winners]] = pending[winners]
        keep = np.ones(pending.size, dtype=bool)
        keep[winners] = False
        pending = pending[keep]
        pos = (pos[keep] + 1) & mask

    return SparseVoxelGrid(
        extent=extent,
        coords=coords,
        features=features,
        batch=int(batch),
        voxel_size=None if voxel_size is None else tuple(float(v) for v in voxel_size),
        origin=None if origin is None else tuple(float(v) for v in origin),
        slot_keys=slot_keys,
        slot_values=slot_values,
    )


def lookup_many(grid: SparseVoxelGrid, coords, batch: int | None = None) -> np.ndarray:
    """Voxel index per coord of a ``(..., 3)`` array, ``-1`` for a miss.

    Out-of-extent coords and coords of another batch are misses.
    """
    coords = np.asarray(coords, dtype=np.int64)
    shape = coords.shape[:-1]
    flat = coords.reshape(-1, 3)
    out = np.full(flat.shape[0], EMPTY, dtype=np.int64)
    if batch is not None and batch != grid.batch:
        return out.reshape(shape)
    valid = np.flatnonzero(in_extent(flat, grid.extent))
    if valid.size == 0 or grid.num_voxels == 0:
        return out.reshape(shape)

    keys = flatten_keys(flat[valid], grid.extent, grid.batch)
    mask = grid.capacity - 1
    pos = keys & mask
    active = np.arange(valid.size)
    for _ in range(grid.capacity):
        slot = grid.slot_keys[pos]
        hit = slot == keys[active]
        out[valid[active[hit]]] = grid.slot_values[pos[hit]]
        go_on = ~hit & (slot != EMPTY)
        if not go_on.any():
            break
        active = active[go_on]
        pos = (pos[go_on] + 1) & mask
    return out.reshape(shape)


def lookup(grid: SparseVoxelGrid, coord, batch: int | None = None) -> int | None:
    """Index of the voxel at ``coord``, or ``None`` if that site is empty."""
    idx = int(lookup_many(grid, np.asarray(coord, dtype=np.int64)[None], batch)[0])
    return None if idx == EMPTY else idx


def probe_lengths(grid: SparseVoxelGrid, coords) -> np.ndarray:
    """Number of slots inspected by each lookup (diagnostics and tests)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    lengths = np.zeros(coords.shape[0], dtype=np.int64)
    valid = np.flatnonzero(in_extent(coords, grid.extent))
    if valid.size == 0:
        return lengths
    keys = flatten_keys(coords[valid], grid.extent, grid.batch)
    mask = grid.capacity - 1
    pos = keys & mask
    active = np.arange(valid.size)
    while active.size:
        lengths[valid[active]] += 1
        slot = grid.slot_keys[pos]
        go_on = (slot != keys[active]) & (slot != EMPTY)
        active = active[go_on]
        pos = (pos[go_on] + 1) & mask
    return lengths


def gather(grid: SparseVoxelGrid, coords) -> tuple[np.ndarray, np.ndarray]:
    """Hit mask and the stored feature rows of the hits, in probe order."""
    idx = lookup_many(grid, np.asarray(coords, dtype=np.int64).reshape(-1, 3))
    hits = idx != EMPTY
    return hits, grid.features[idx[hits]]


def save_grid(grid: SparseVoxelGrid, path) -> None:
    """Write a grid to the little-endian binary container.

    Layout: header (magic, version, batch, extent, voxel size, origin, N, C),
    then N*3 int32 coords, then N*C float32 features. Unknown geometry is
    stored as NaN.
    """
    nan3 = (float("nan"),) * 3
    header = _GRID_HEADER.pack(
        GRID_MAGIC, GRID_VERSION, grid.batch, *grid.extent,
        *(grid.voxel_size or nan3), *(grid.origin or nan3),
        grid.num_voxels, grid.channels,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(grid.coords, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(grid.features, dtype="<f4").tobytes())


def load_grid(path) -> SparseVoxelGrid:
    data = Path(path).read_bytes()
    if len(data) < _GRID_HEADER.size:
        raise FormatError(f"{path}: truncated grid header")
    magic, version, batch, *rest = _GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise FormatError(f"{path}: not a grid file (magic {magic!r})")
    if version != GRID_VERSION:
        raise FormatError(f"{path}: unsupported grid version {version}")
    extent, vs, org, (n, c) = rest[0:3], rest[3:6], rest[6:9], rest[9:11]
    offset = _GRID_HEADER.size
    expected = offset + n * 3 * 4 + n * c * 4
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    coords = np.frombuffer(data, dtype="<i4", count=n * 3, offset=offset).reshape(n, 3)
    offset += n * 3 * 4
    feats = np.frombuffer(data, dtype="<f4", count=n * c, offset=offset).reshape(n, c)
    return build_hash(
        coords.astype(np.int64),
        feats.astype(np.float32),
        extent,
        batch,
        None if np.isnan(vs).any() else vs,
        None if np.isnan(org).any() else org,
    )
