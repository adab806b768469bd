"""Query and key sampling inside windows.

* Chessboard sampling labels voxels with a periodic symbol derived from the
  parity of their global grid coordinates. Block ``t`` attends only from
  voxels carrying symbol ``t mod period``; the others are interpolated.
* Keys are gathered per key-window scale and thinned with farthest point
  sampling, each scale capped independently.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .config import CBS_DEFAULT_AXES, parse_rate
from .errors import ConfigError
from .voxel_hash import EMPTY, SparseVoxelGrid
from .windowing import gather_windows

INTERP_EPS = 1e-8
_AXIS = {"x": 0, "y": 1, "z": 2}
_BIG = np.iinfo(np.int64).max


@dataclass(frozen=True)
class ChessboardSpec:
    """Sampling rate and the axes carrying the interval pattern.

    ``rate=None`` disables sampling: every voxel is a query in every block.
    """

    rate: Fraction | None = Fraction(1, 4)
    axes: str = "xy"

    def __post_init__(self):
        if self.rate is None:
            return
        if len(self.axes) != len(set(self.axes)) or not set(self.axes) <= set(_AXIS):
            raise ConfigError(f"invalid chessboard axes {self.axes!r}")
        if Fraction(1, 2 ** len(self.axes)) != self.rate:
            raise ConfigError(f"rate {self.rate} needs {self.rate.denominator.bit_length() - 1} axes, "
                              f"got {self.axes!r}")

    @classmethod
    def from_config(cls, rate, axes: str | None = None) -> "ChessboardSpec":
        parsed = parse_rate(rate)
        if parsed is None:
            return cls(None, "")
        return cls(parsed, axes or CBS_DEFAULT_AXES[str(parsed)])

    @property
    def period(self) -> int:
        return 1 if self.rate is None else 2 ** len(self.axes)


def chessboard_symbols(coords, spec: ChessboardSpec) -> np.ndarray:
    """Vectorized symbol ids in ``[0, period)`` for ``(..., 3)`` coords."""
    coords = np.asarray(coords, dtype=np.int64)
    sym = np.zeros(coords.shape[:-1], dtype=np.int64)
    if spec.rate is None:
        return sym
    for axis in spec.axes:
        sym = sym * 2 + (coords[..., _AXIS[axis]] & 1)
    return sym


def chessboard_symbol(coord, spec: ChessboardSpec) -> int:
    return int(chessboard_symbols(np.asarray(coord)[None], spec)[0])


def sample_queries_cbs(coords, members, block_index: int, spec: ChessboardSpec):
    """Split a window's members into (sampled, unsampled) voxel indices for block ``t``."""
    members = np.asarray(members, dtype=np.int64)
    if spec.rate is None:
        return members, members[:0]
    hit = chessboard_symbols(np.asarray(coords)[members], spec) == block_index % spec.period
    return members[hit], members[~hit]


def fps_padded(coords, counts, k: int, seeds=None) -> tuple[np.ndarray, np.ndarray]:
    """Farthest point sampling on many padded point sets at once.

    Args:
        coords: (L, P, 3) integer coordinates, rows padded past ``counts``.
        counts: (L,) number of valid points per row.
        k: points to select per row.
        seeds: (L,) first pick per row; defaults to position 0.

    Returns:
        ``(picks, taken)`` with ``picks`` of shape (L, min(k, P)) padded with -1.

    Distances are compared as exact integer squared distances, and ``argmax``
    returns the first maximum, so ties go to the smaller position.
    """
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    coords = np.asarray(coords, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    n_rows, width = coords.shape[:2]
    kk = min(k, width)
    picks = np.full((n_rows, kk), EMPTY, dtype=np.int64)
    taken = np.minimum(counts, k)
    if n_rows == 0 or kk == 0:
        return picks, taken
    valid = np.arange(width)[None, :] < counts[:, None]
    min_d = np.where(valid, _BIG, -1)
    cur = np.zeros(n_rows, dtype=np.int64) if seeds is None else np.asarray(seeds, dtype=np.int64)
    rows = np.arange(n_rows)
    xs, ys, zs = coords[..., 0], coords[..., 1], coords[..., 2]
    for step in range(kk):
        live = step < taken
        if not live.any():
            break
        picks[live, step] = cur[live]
        c = coords[rows, cur]
        d = (xs - c[:, 0:1]) ** 2 + (ys - c[:, 1:2]) ** 2 + (zs - c[:, 2:3]) ** 2
        np.minimum(min_d, d, out=min_d, where=valid)
        # chosen points drop below every candidate, so duplicates are still reachable
        min_d[rows[live], cur[live]] = -1
        cur = np.argmax(min_d, axis=1)
    return picks, taken


def farthest_point_sample(coords, k: int) -> np.ndarray:
    """Greedy FPS over integer coords, seeded at the lexicographically smallest coord.

    For in-extent voxels the lexicographic minimum is also the smallest
    flattened key.
    """
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    n = coords.shape[0]
    if k == 0 or n == 0:
        if k > 0:
            raise ValueError("cannot sample from an empty point set")
        return np.zeros(0, dtype=np.int64)
    seed = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))[0]
    picks, taken = fps_padded(coords[None], np.array([n]), k, np.array([seed]))
    return picks[0, : taken[0]]


@dataclass
class KeySampleSet:
    indices: list[np.ndarray]  # per scale, voxel indices in FPS order
    coords: list[np.ndarray]
    features: list[np.ndarray]

    @property
    def counts(self) -> list[int]:
        return [len(i) for i in self.indices]


def sample_keys(grid: SparseVoxelGrid, centers, key_windows, max_gather, num_keys):
    """Balanced key sampling for many window centers.

    Returns one ``(idx, counts)`` pair per key scale, ``idx`` being (L, K)
    voxel indices padded with -1.
    """
    out = []
    for r in key_windows:
        hits, n_hits = gather_windows(grid, centers, r, max_gather)
        k = hits.shape[1] if num_keys is None else num_keys
        safe = np.where(hits == EMPTY, 0, hits)
        pts = grid.coords[safe] if grid.num_voxels else np.zeros(hits.shape + (3,), np.int64)
        picks, taken = fps_padded(pts, n_hits, k)
        idx = np.where(picks == EMPTY, EMPTY, np.take_along_axis(hits, np.maximum(picks, 0), 1))
        out.append((idx, taken))
    return out


def balanced_multiwindow_sample(grid: SparseVoxelGrid, center, key_windows, max_gather, num_keys) -> KeySampleSet:
    """Keys for one window: per scale, gather up to ``max_gather`` hits, then FPS to ``num_keys``."""
    per_scale = sample_keys(grid, np.asarray(center, dtype=np.float64)[None], key_windows,
                            max_gather, num_keys)
    indices = [idx[0, : n[0]] for idx, n in per_scale]
    return KeySampleSet(
        indices=indices,
        coords=[grid.coords[i] for i in indices],
        features=[grid.features[i] for i in indices],
    )


def knn_interpolate_padded(u_coords, u_valid, s_coords, s_counts, s_feats, k: int = 3):
    """Inverse-distance interpolation from the ``k`` nearest sampled voxels, batched.

    Shapes: ``u_coords`` (B, U, 3), ``u_valid`` (B, U), ``s_coords`` (B, S, 3),
    ``s_counts`` (B,), ``s_feats`` (B, S, C). Rows with no sampled voxel
    return zeros; callers decide how to handle them.
    """
    u = np.asarray(u_coords, dtype=np.float64)
    s = np.asarray(s_coords, dtype=np.float64)
    f = np.asarray(s_feats, dtype=np.float64)
    n_b, n_u = u.shape[:2]
    n_s = s.shape[1]
    out = np.zeros((n_b, n_u, f.shape[2]), dtype=np.float64)
    if n_b == 0 or n_u == 0 or n_s == 0:
        return out
    diff = u[:, :, None, :] - s[:, None, :, :]
    d2 = np.einsum("buvi,buvi->buv", diff, diff)
    s_valid = np.arange(n_s)[None, :] < np.asarray(s_counts)[:, None]
    d2 = np.where(s_valid[:, None, :], d2, np.inf)
    kk = min(k, n_s)
    near = np.argsort(d2, axis=2, kind="stable")[:, :, :kk]
    near_d2 = np.take_along_axis(d2, near, axis=2)
    w = np.where(np.isfinite(near_d2), 1.0 / (np.sqrt(near_d2) + INTERP_EPS), 0.0)
    nf = np.take_along_axis(f[:, None, :, :], near[..., None], axis=2)  # (B, U, kk, C)
    num = np.einsum("buk,bukc->buc", w, nf)
    den = w.sum(axis=2)
    ok = (den > 0) & np.asarray(u_valid, dtype=bool)
    out[ok] = num[ok] / den[ok][:, None]
    return out


def knn_interpolate(unsampled_coords, sampled_coords, sampled_feats, k: int = 3):
    """Interpolate features at unsampled voxels from nearby sampled ones.

    Returns ``(features, interpolated)``. With no sampled voxels nothing can
    be interpolated: ``features`` is ``None`` and ``interpolated`` is False.
    """
    u = np.asarray(unsampled_coords, dtype=np.float64).reshape(-1, 3)
    s = np.asarray(sampled_coords, dtype=np.float64).reshape(-1, 3)
    if s.shape[0] == 0:
        return None, False
    f = np.asarray(sampled_feats, dtype=np.float64).reshape(s.shape[0], -1)
    res = knn_interpolate_padded(u[None], np.ones((1, u.shape[0]), bool), s[None],
                                 np.array([s.shape[0]]), f[None], k)
    return res[0], True
