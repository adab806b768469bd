"""Scale-aware head attention with relative position bias.

Heads are split into groups, one per key-window scale. Group ``m`` reads the
``m``-th channel slice of the projected queries and attends over the keys
sampled from scale ``m``. Each group owns a position table of shape
``(C/M, R)`` whose columns are indexed by the query-to-key offset; the
query-side and key-side biases are added to every head of the group.

All functions accept leading batch dimensions so a chunk of windows runs as
one padded batch. Math is float64; callers store results as float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError
from .voxel_hash import SparseVoxelGrid
from .weights import BlockWeights
from .windowing import gather_windows, partition_query_windows

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * (x * x * x))))


def layer_norm(x: np.ndarray, scale, shift, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + shift


def project_qkv(f_query, f_keys, w: BlockWeights):
    """``Q = F0 Wq`` and per-scale ``K_m = F_m Wk_m``, ``V_m = F_m Wv_m``."""
    f_query = np.asarray(f_query, dtype=np.float64)
    if f_query.shape[-1] != w.channels:
        raise DimensionError(f"query features have {f_query.shape[-1]} channels, weights expect {w.channels}")
    if len(f_keys) != w.num_groups:
        raise DimensionError(f"{len(f_keys)} key scales for {w.num_groups} head groups")
    q = f_query @ w.w_q.astype(np.float64)
    ks, vs = [], []
    for m, fk in enumerate(f_keys):
        fk = np.asarray(fk, dtype=np.float64)
        if fk.shape[-1] != w.channels:
            raise DimensionError(f"scale {m} key features have {fk.shape[-1]} channels")
        ks.append(fk @ w.w_k[m].astype(np.float64))
        vs.append(fk @ w.w_v[m].astype(np.float64))
    return q, ks, vs


def relative_position_index(x_query, x_key, r_max, valid=None) -> np.ndarray:
    """Flattened index of every query-to-key offset into a ``prod(2 r_max - 1)`` table.

    ``valid`` masks padded pairs; those get index 0 and are never checked.
    """
    xq = np.asarray(x_query, dtype=np.int64)
    xk = np.asarray(x_key, dtype=np.int64)
    r_max = np.asarray(r_max, dtype=np.int64)
    span = 2 * r_max - 1
    delta = xk[..., None, :, :] - xq[..., :, None, :] + (r_max - 1)
    ok = np.all((delta >= 0) & (delta < span), axis=-1)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        ok |= ~valid
        delta = np.where(valid[..., None], delta, 0)
    if not ok.all():
        raise IndexError(f"relative offset outside +/-(r_max - 1) for r_max={tuple(r_max)}")
    return (delta[..., 0] * span[1] + delta[..., 1]) * span[2] + delta[..., 2]


def rpe_bias(a: np.ndarray, table: np.ndarray, index: np.ndarray, side: str = "query") -> np.ndarray:
    """Gather position bias ``B[q, k] = (A T)[row, I[q, k]]``.

    ``row`` is ``q`` for the query side (``A = Q_m``) and ``k`` for the key
    side (``A = K_m``). Computed as a dot product against gathered table
    columns, which never materializes the full ``A T`` product.
    """
    table = np.asarray(table, dtype=np.float64)
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[1]):
        raise IndexError(f"position index outside table of size {table.shape[1]}")
    if side not in ("query", "key"):
        raise ValueError(f"side must be 'query' or 'key', got {side!r}")
    cols = table.T[index]  # (..., Nq, Nk, d)
    a = np.asarray(a, dtype=np.float64)
    if side == "query":
        return np.matmul(cols, a[..., :, :, None])[..., 0]
    return np.swapaxes(np.matmul(np.swapaxes(cols, -2, -3), a[..., :, :, None])[..., 0], -1, -2)


def scale_aware_attention(q, k, v, bias_q, bias_k, heads: int, key_mask=None,
                          return_weights: bool = False):
    """Multi-head attention of one head group with additive position biases.

    Logits are scaled by ``sqrt(group width)``. Rows without any valid key
    produce zeros.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    width = q.shape[-1]
    if width % heads:
        raise DimensionError(f"group width {width} not divisible by {heads} heads")
    n_k = k.shape[-2]
    lead = q.shape[:-2]
    n_q = q.shape[-2]
    if n_k == 0:
        out = np.zeros(lead + (n_q, v.shape[-1]))
        return (out, np.zeros(lead + (heads, n_q, 0))) if return_weights else out
    dh = width // heads
    qh = q.reshape(lead + (n_q, heads, dh))
    kh = k.reshape(lead + (n_k, heads, dh))
    vh = v.reshape(lead + (n_k, heads, v.shape[-1] // heads))
    logits = np.matmul(np.swapaxes(qh, -2, -3), np.moveaxis(kh, -3, -1)) / np.sqrt(width)
    logits = logits + (bias_q + bias_k)[..., None, :, :]
    if np.isnan(logits).any():
        raise NumericError("NaN in attention logits")
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        logits = np.where(key_mask[..., None, None, :], logits, -np.inf)
        any_key = key_mask.any(axis=-1)[..., None, None, None]
    else:
        any_key = True
    peak = np.max(logits, axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(logits - peak)
    weights = e / np.maximum(e.sum(axis=-1, keepdims=True), np.finfo(np.float64).tiny)
    weights = np.where(any_key, weights, 0.0)
    out = np.swapaxes(np.matmul(weights, np.swapaxes(vh, -2, -3)), -2, -3)
    out = out.reshape(lead + (n_q, v.shape[-1]))
    return (out, weights) if return_weights else out


def merge_heads_ffn(group_outputs, w: BlockWeights) -> np.ndarray:
    """Concatenate group outputs and apply ``Y = MLP(LN(Y~)) + Y~``."""
    y = np.concatenate([np.asarray(g, dtype=np.float64) for g in group_outputs], axis=-1)
    if y.shape[-1] != w.channels:
        raise DimensionError(f"merged width {y.shape[-1]} != {w.channels} channels")
    h = layer_norm(y, w.ln_scale.astype(np.float64), w.ln_shift.astype(np.float64), w.ln_eps)
    h = gelu(h @ w.ffn_w1.astype(np.float64) + w.ffn_b1)
    return h @ w.ffn_w2.astype(np.float64) + w.ffn_b2 + y


def attend(q_feats, q_coords, keys, w: BlockWeights, q_mask=None) -> np.ndarray:
    """Full attention block over a padded batch of windows.

    Args:
        q_feats: (..., Nq, C) query features.
        q_coords: (..., Nq, 3) query voxel coords.
        keys: one ``(feats, coords, mask)`` triple per head group with shapes
            (..., Nk, C), (..., Nk, 3), (..., Nk).
        w: block weights.
        q_mask: (..., Nq) valid queries; padded rows come back as zeros.
    """
    q_feats = np.asarray(q_feats, dtype=np.float64)
    if q_mask is None:
        q_mask = np.ones(q_feats.shape[:-1], dtype=bool)
    q, ks, vs = project_qkv(q_feats, [kf for kf, _, _ in keys], w)
    d = w.group_width
    outs = []
    for m, (_, k_coords, k_mask) in enumerate(keys):
        k_mask = np.asarray(k_mask, dtype=bool)
        q_m = q[..., m * d:(m + 1) * d]
        pair_ok = q_mask[..., :, None] & k_mask[..., None, :]
        idx = relative_position_index(q_coords, k_coords, w.rpe_extent, pair_ok)
        b_q = rpe_bias(q_m, w.rpe[m], idx, "query")
        b_k = rpe_bias(ks[m], w.rpe[m], idx, "key")
        outs.append(scale_aware_attention(q_m, ks[m], vs[m], b_q, b_k, w.heads[m], k_mask))
    merged = np.concatenate(outs, axis=-1)
    out = np.zeros_like(merged)
    out[q_mask] = merge_heads_ffn([merged[q_mask]], w)
    return out


def attend_window(x_query, f_query, key_coords, key_feats, w: BlockWeights) -> np.ndarray:
    """Unbatched convenience wrapper: one window, variable key counts per scale."""
    x_query = np.asarray(x_query).reshape(-1, 3)
    keys = []
    for xk, fk in zip(key_coords, key_feats):
        xk = np.asarray(xk).reshape(-1, 3)
        fk = np.asarray(fk, dtype=np.float64).reshape(xk.shape[0], w.channels)
        keys.append((fk, xk, np.ones(xk.shape[0], bool)))
    return attend(f_query, x_query, keys, w)


@dataclass
class BevMap:
    """Sparse bird's-eye-view map: one feature row per occupied (x, y) column."""

    extent_xy: tuple[int, int]
    xy: np.ndarray  # (P, 2) int64
    features: np.ndarray  # (P, C) float32

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.extent_xy + (self.features.shape[1],), dtype=np.float32)
        dense[self.xy[:, 0], self.xy[:, 1]] = self.features
        return dense


def pillar_compress(grid: SparseVoxelGrid, w: BlockWeights) -> BevMap:
    """Collapse the vertical axis with one attention pass per pillar.

    Each non-empty (x, y) column is a window of size (1, 1, extent_z). Its
    single query starts from the mean of the column's voxel features and
    sits at the column's central voxel; every head group attends over all
    voxels of the column.
    """
    z_ext = grid.extent[2]
    r = (1, 1, z_ext)
    if tuple(w.rpe_extent) != r:
        raise DimensionError(f"pillar weights sized for {w.rpe_extent}, grid needs {r}")
    ws = partition_query_windows(grid, r)
    n_p = len(ws)
    if n_p == 0:
        return BevMap(grid.extent[:2], np.zeros((0, 2), np.int64),
                      np.zeros((0, grid.channels), np.float32))
    feats = grid.features.astype(np.float64)
    sums = np.zeros((n_p, grid.channels))
    np.add.at(sums, ws.voxel_window, feats)
    q_feats = (sums / ws.counts[:, None])[:, None, :]
    q_coords = np.floor(ws.centers).astype(np.int64)[:, None, :]
    idx, counts = gather_windows(grid, ws.centers, r)
    mask = np.arange(idx.shape[1])[None, :] < counts[:, None]
    safe = np.maximum(idx, 0)
    k = (feats[safe], grid.coords[safe], mask)
    out = attend(q_feats, q_coords, [k] * w.num_groups, w)[:, 0, :]
    return BevMap(grid.extent[:2], ws.window_coords[:, :2].copy(), out.astype(np.float32))
