"""Dense, loop-based reference implementations used to check the sparse paths.

Nothing here imports production code paths; only the plain data containers
(grids, weights, config) are shared. Everything is meant to be obviously
correct rather than fast, so keep inputs small: extents up to 64^3 and at
most 5,000 voxels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_EXTENT = 64
MAX_VOXELS = 5000


@dataclass
class DenseGrid:
    """Extent-sized occupancy (voxel index or -1) plus dense feature volume."""

    index: np.ndarray  # (X, Y, Z) int64
    features: np.ndarray  # (X, Y, Z, C) float32

    @property
    def extent(self):
        return self.index.shape


def to_dense(grid) -> DenseGrid:
    ext = tuple(grid.extent)
    if max(ext) > MAX_EXTENT or grid.num_voxels > MAX_VOXELS:
        raise ValueError(f"oracle limited to extent <= {MAX_EXTENT}^3 and {MAX_VOXELS} voxels")
    index = -np.ones(ext, dtype=np.int64)
    feats = np.zeros(ext + (grid.channels,), dtype=np.float32)
    for i in range(grid.num_voxels):
        x, y, z = (int(v) for v in grid.coords[i])
        index[x, y, z] = i
        feats[x, y, z] = grid.features[i]
    return DenseGrid(index, feats)


def from_dense(dense: DenseGrid):
    """Occupied coords (in voxel-index order) and their features."""
    n = int((dense.index >= 0).sum())
    coords = np.zeros((n, 3), dtype=np.int64)
    feats = np.zeros((n, dense.features.shape[-1]), dtype=np.float32)
    for x, y, z in zip(*np.nonzero(dense.index >= 0)):
        i = dense.index[x, y, z]
        coords[i] = (x, y, z)
        feats[i] = dense.features[x, y, z]
    return coords, feats


def dense_window_gather(dense: DenseGrid, center, r) -> list[int]:
    """Scan every cell whose center ``i + 0.5`` lies in ``[c - r/2, c + r/2)``.

    Loops run x, then y, then z, which is ascending flattened-key order.
    """
    ranges = []
    for c, size, n in zip(center, r, dense.extent):
        lo, hi = c - size / 2.0, c + size / 2.0
        cells = [i for i in range(math.floor(lo) - 1, math.ceil(hi) + 1)
                 if lo <= i + 0.5 < hi and 0 <= i < n]
        ranges.append(cells)
    hits = []
    for x in ranges[0]:
        for y in ranges[1]:
            for z in ranges[2]:
                if dense.index[x, y, z] >= 0:
                    hits.append(int(dense.index[x, y, z]))
    return hits


def linear_scan_lookup(coords, probe) -> int:
    """Index of ``probe`` in ``coords`` by exhaustive comparison, -1 if absent."""
    px, py, pz = (int(v) for v in probe)
    for i, (x, y, z) in enumerate(coords):
        if x == px and y == py and z == pz:
            return i
    return -1


def dense_partition(coords, r0):
    """Window coordinate -> member voxel indices, by explicit grouping."""
    groups: dict[tuple, list[int]] = {}
    for i, c in enumerate(coords):
        w = tuple(int(v) // int(s) for v, s in zip(c, r0))
        groups.setdefault(w, []).append(i)
    return groups


def dense_fps(coords, k: int) -> list[int]:
    """O(n^2) farthest point sampling with the production seed and tie rules.

    Seed is the lexicographically smallest coord (first occurrence). The full
    pairwise squared-distance matrix is built up front; each step recomputes
    every candidate's minimum over the whole chosen set from scratch and keeps
    the first index with the largest value.
    """
    pts = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    n = len(pts)
    if k <= 0 or n == 0:
        return []
    diff = pts[:, None, :] - pts[None, :, :]
    dist = (diff * diff).sum(axis=-1)
    seed = min(range(n), key=lambda i: (tuple(pts[i]), i))
    chosen = [seed]
    while len(chosen) < min(k, n):
        nearest = dist[chosen].min(axis=0)
        nearest[chosen] = -1
        chosen.append(int(np.argmax(nearest)))
    return chosen


def dense_rpe_index(xq, xk, r_max) -> np.ndarray:
    span = [2 * int(r) - 1 for r in r_max]
    out = np.zeros((len(xq), len(xk)), dtype=np.int64)
    for i, q in enumerate(xq):
        for j, k in enumerate(xk):
            d = [int(k[a]) - int(q[a]) + int(r_max[a]) - 1 for a in range(3)]
            if any(not 0 <= d[a] < span[a] for a in range(3)):
                raise IndexError("offset outside table")
            out[i, j] = d[0] * span[1] * span[2] + d[1] * span[2] + d[2]
    return out


def dense_bias(a, table, index, side: str) -> np.ndarray:
    """Literal ``G(A T, I)``: materialize ``A T`` then pick entries."""
    full = np.asarray(a, dtype=np.float64) @ np.asarray(table, dtype=np.float64)
    nq, nk = index.shape
    out = np.zeros((nq, nk))
    for q in range(nq):
        for k in range(nk):
            row = q if side == "query" else k
            out[q, k] = full[row, index[q, k]]
    return out


def dense_attention(q, k, v, bias_q, bias_k, heads: int = 1) -> np.ndarray:
    """Per head and per query: explicit logits, max-shifted softmax, weighted sum."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nq, width = q.shape
    nk = k.shape[0]
    out = np.zeros((nq, v.shape[1]))
    if nk == 0:
        return out
    dh = width // heads
    dv = v.shape[1] // heads
    scale = math.sqrt(width)
    for h in range(heads):
        qs, vs = slice(h * dh, (h + 1) * dh), slice(h * dv, (h + 1) * dv)
        for i in range(nq):
            logits = [float(np.dot(q[i, qs], k[j, qs])) / scale + bias_q[i, j] + bias_k[i, j]
                      for j in range(nk)]
            peak = max(logits)
            e = [math.exp(x - peak) for x in logits]
            total = sum(e)
            acc = np.zeros(dv)
            for j in range(nk):
                acc += (e[j] / total) * v[j, vs]
            out[i, vs] = acc
    return out


def _dense_ffn(y, w) -> np.ndarray:
    out = np.zeros_like(y)
    for i, row in enumerate(y):
        mean = sum(row) / len(row)
        var = sum((x - mean) ** 2 for x in row) / len(row)
        normed = (row - mean) / math.sqrt(var + w.ln_eps) * w.ln_scale + w.ln_shift
        pre = normed @ w.ffn_w1.astype(np.float64) + w.ffn_b1
        act = np.array([0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
                        for x in pre])
        out[i] = act @ w.ffn_w2.astype(np.float64) + w.ffn_b2 + row
    return out


def dense_block_attention(xq, fq, key_sets, w) -> np.ndarray:
    """Straight-line block math for one window: projections, biases, attention, FFN."""
    fq = np.asarray(fq, dtype=np.float64)
    q = fq @ w.w_q.astype(np.float64)
    d = w.channels // w.num_groups
    parts = []
    for m, (xk, fk) in enumerate(key_sets):
        fk = np.asarray(fk, dtype=np.float64).reshape(len(xk), w.channels)
        km = fk @ w.w_k[m].astype(np.float64)
        vm = fk @ w.w_v[m].astype(np.float64)
        qm = q[:, m * d:(m + 1) * d]
        if len(xk) == 0:
            parts.append(np.zeros((len(xq), d)))
            continue
        idx = dense_rpe_index(xq, xk, w.rpe_extent)
        bq = dense_bias(qm, w.rpe[m], idx, "query")
        bk = dense_bias(km, w.rpe[m], idx, "key")
        parts.append(dense_attention(qm, km, vm, bq, bk, w.heads[m]))
    return _dense_ffn(np.concatenate(parts, axis=1), w)


def _symbol(c, axes) -> int:
    s = 0
    for a in axes:
        s = 2 * s + int(c["xyz".index(a)]) % 2
    return s


def dense_knn(u, s_coords, s_feats, k) -> np.ndarray:
    dists = sorted((math.dist(u, sc), j) for j, sc in enumerate(s_coords))[:k]
    ws = [1.0 / (d + 1e-8) for d, _ in dists]
    return sum(wt * np.asarray(s_feats[j], np.float64) for wt, (_, j) in zip(ws, dists)) / sum(ws)


def dense_block_reference(grid, block_index, cfg, w) -> np.ndarray:
    """Whole-block reference on a dense copy of ``grid``; returns new features (N, C) float64."""
    dense = to_dense(grid)
    coords = [tuple(int(v) for v in c) for c in grid.coords]
    feats = grid.features.astype(np.float64)
    out = feats.copy()
    rate = str(cfg.cbs_rate).lower()
    axes = "" if rate in ("off", "none", "1") else (cfg.cbs_axes or {"1/2": "x", "1/4": "xy", "1/8": "xyz"}[rate])
    period = 2 ** len(axes)
    t = block_index % period
    for wcoord, members in sorted(dense_partition(coords, cfg.query_window).items()):
        members = sorted(members, key=lambda i: coords[i])
        center = [(wc + 0.5) * r for wc, r in zip(wcoord, cfg.query_window)]
        queries = [i for i in members if _symbol(coords[i], axes) == t]
        if not queries:
            continue
        key_sets = []
        for r in cfg.key_windows:
            hits = dense_window_gather(dense, center, r)
            if cfg.max_gather is not None:
                hits = hits[: cfg.max_gather]
            k = len(hits) if cfg.num_keys is None else cfg.num_keys
            picked = [hits[j] for j in dense_fps([coords[i] for i in hits], k)]
            key_sets.append(([coords[i] for i in picked], feats[picked]))
        y = dense_block_attention([coords[i] for i in queries], feats[queries], key_sets, w)
        y = y.astype(np.float32).astype(np.float64)
        for row, i in zip(y, queries):
            out[i] = row
        if axes:
            for i in members:
                if i not in queries:
                    out[i] = dense_knn(coords[i], [coords[j] for j in queries], y, cfg.knn_k)
    return out
