"""Query-window partition and hash-based window gathers.

Coordinates here follow the cell convention: voxel ``i`` covers ``[i, i+1)``
so its center sits at ``i + 0.5``. A window of size ``r`` centered at ``c``
covers the box ``[c - r/2, c + r/2)`` and contains the voxels whose centers
fall inside it. With that convention the query window of a voxel ``x`` is
centered at ``(floor(x / r0) + 0.5) * r0`` and contains exactly the voxels
sharing ``floor(x / r0)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxel_hash import EMPTY, SparseVoxelGrid, flatten_keys, lookup_many


@dataclass
class WindowSet:
    window_size: tuple[int, int, int]
    window_coords: np.ndarray  # (L, 3) int64, floor(x / r0)
    centers: np.ndarray  # (L, 3) float64, voxel units
    ptr: np.ndarray  # (L + 1,) offsets into ``members``
    members: np.ndarray  # voxel indices grouped by window, ascending key inside a window
    voxel_window: np.ndarray  # (N,) window id of every voxel

    def __len__(self) -> int:
        return self.centers.shape[0]

    def member_list(self, j: int) -> np.ndarray:
        return self.members[self.ptr[j]: self.ptr[j + 1]]

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.ptr)


def window_centers(window_coords, r0) -> np.ndarray:
    return (np.asarray(window_coords, dtype=np.float64) + 0.5) * np.asarray(r0, dtype=np.float64)


def partition_query_windows(grid: SparseVoxelGrid, r0) -> WindowSet:
    """Group voxels into non-overlapping windows of size ``r0``.

    Windows are returned in ascending order of their flattened window
    coordinate; duplicate centers collapse by construction.
    """
    r0 = tuple(int(v) for v in r0)
    coords = grid.coords
    n = grid.num_voxels
    if n == 0:
        empty = np.zeros((0, 3), dtype=np.int64)
        return WindowSet(r0, empty, empty.astype(np.float64), np.zeros(1, dtype=np.int64),
                         np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    wcoords = coords // np.asarray(r0, dtype=np.int64)
    wextent = tuple(-(-e // r) for e, r in zip(grid.extent, r0))
    wkeys = flatten_keys(wcoords, wextent)
    uniq, first, inverse = np.unique(wkeys, return_index=True, return_inverse=True)
    order = np.lexsort((grid.keys(), inverse))
    counts = np.bincount(inverse, minlength=uniq.shape[0])
    ptr = np.zeros(uniq.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    wc = wcoords[first]
    return WindowSet(r0, wc, window_centers(wc, r0), ptr, order.astype(np.int64),
                     inverse.astype(np.int64))


def window_offsets(r) -> np.ndarray:
    """All integer offsets of an ``r`` box in lexicographic (x, y, z) order."""
    rx, ry, rz = (int(v) for v in r)
    grid = np.stack(np.meshgrid(np.arange(rx), np.arange(ry), np.arange(rz), indexing="ij"), -1)
    return grid.reshape(-1, 3).astype(np.int64)


def window_lower_corner(centers, r) -> np.ndarray:
    """Lowest voxel coord inside the box of size ``r`` around each center."""
    centers = np.asarray(centers, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    # centers are multiples of 0.5, so this is exact in floating point
    return np.ceil(centers - r / 2 - 0.5).astype(np.int64)


def gather_windows(grid: SparseVoxelGrid, centers, r, cap: int | None = None):
    """Hash-probe every cell of the ``r`` box around each center.

    Returns ``(idx, counts)``: ``idx`` is ``(L, P)`` voxel indices padded
    with -1, hits first in ascending flattened-key order, truncated to
    ``cap``; ``counts`` holds the number of valid entries per row.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    offsets = window_offsets(r)
    width = offsets.shape[0] if cap is None else min(int(cap), offsets.shape[0])
    if centers.shape[0] == 0:
        return np.zeros((0, width), dtype=np.int64), np.zeros(0, dtype=np.int64)
    cand = window_lower_corner(centers, r)[:, None, :] + offsets[None, :, :]
    idx = lookup_many(grid, cand)
    miss = idx == EMPTY
    order = np.argsort(miss, axis=1, kind="stable")[:, :width]
    idx = np.take_along_axis(idx, order, axis=1)
    counts = np.minimum((~miss).sum(axis=1), width)
    return idx, counts


def gather_window_voxels(grid: SparseVoxelGrid, center, r, cap: int | None = None) -> np.ndarray:
    """Voxel indices inside one window, ascending by flattened key, at most ``cap``."""
    if cap is not None and cap < 1:
        raise ValueError("cap must be >= 1")
    idx, counts = gather_windows(grid, np.asarray(center)[None], r, cap)
    return idx[0, : counts[0]]
