"""Stacked sparse window-attention blocks.

One block:

1. partition voxels into query windows;
2. split each window's voxels by chessboard symbol ``t mod period``;
3. sample keys per scale around the window center (gather + FPS);
4. update sampled queries with scale-aware attention and the FFN;
5. interpolate the remaining voxels of the window from the updated queries.

Windows are processed in fixed-size chunks. Chunk boundaries do not depend
on the worker count, and each chunk writes a disjoint set of rows, so the
result is identical for any number of threads.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import attend
from .config import PipelineConfig
from .sampling import ChessboardSpec, chessboard_symbols, knn_interpolate_padded, sample_keys
from .voxel_hash import EMPTY, SparseVoxelGrid
from .weights import BlockWeights
from .windowing import WindowSet, partition_query_windows

log = logging.getLogger(__name__)


@dataclass
class BlockStats:
    block_index: int
    symbol: int
    num_windows: int = 0
    active_windows: int = 0
    num_queries: int = 0
    num_interpolated: int = 0
    num_passthrough: int = 0
    key_counts: list[int] = field(default_factory=list)


def pad_segments(values: np.ndarray, seg: np.ndarray, n_seg: int) -> np.ndarray:
    """Scatter ``values`` grouped by ascending ``seg`` ids into an (n_seg, max_len) array padded with -1."""
    counts = np.bincount(seg, minlength=n_seg)
    width = int(counts.max()) if counts.size else 0
    out = np.full((n_seg, width), EMPTY, dtype=np.int64)
    if values.size:
        starts = np.zeros(n_seg, dtype=np.int64)
        np.cumsum(counts[:-1], out=starts[1:])
        rank = np.arange(values.size) - starts[seg]
        out[seg, rank] = values
    return out


def _chunks(items: np.ndarray, size: int):
    return [items[i:i + size] for i in range(0, items.size, size)]


def _run(fn, chunks, workers: int):
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def attend_query_windows(
    query_grid: SparseVoxelGrid,
    windows: WindowSet,
    query_mask: np.ndarray,
    key_grid: SparseVoxelGrid,
    cfg: PipelineConfig,
    w: BlockWeights,
    knn_k: int | None = None,
    workers: int = 1,
):
    """Attention over windows of ``query_grid`` with keys sampled from ``key_grid``.

    ``query_mask`` marks the voxels that act as queries. When ``knn_k`` is
    set, the other voxels of every window holding a query are interpolated
    from the updated queries. Returns ``(updated_idx, updated_feats,
    interp_idx, interp_feats, key_totals)``.
    """
    members = windows.members
    member_win = np.repeat(np.arange(len(windows)), windows.counts)
    is_query = query_mask[members]
    n_q_win = np.bincount(member_win[is_query], minlength=len(windows))
    active = np.flatnonzero(n_q_win > 0)
    feats = query_grid.features
    coords = query_grid.coords
    key_feats = key_grid.features

    def process(win_ids):
        n_b = win_ids.size
        local = np.full(len(windows), -1, dtype=np.int64)
        local[win_ids] = np.arange(n_b)
        sel = local[member_win] >= 0
        q_members = members[sel & is_query]
        q_idx = pad_segments(q_members, local[member_win[sel & is_query]], n_b)
        q_mask = q_idx != EMPTY
        q_safe = np.maximum(q_idx, 0)

        keys, totals = [], []
        for k_idx, k_n in sample_keys(key_grid, windows.centers[win_ids], cfg.key_windows,
                                      cfg.max_gather, cfg.num_keys):
            k_mask = k_idx != EMPTY
            k_safe = np.maximum(k_idx, 0)
            kf = key_feats[k_safe] if key_grid.num_voxels else np.zeros(k_idx.shape + (w.channels,))
            kc = key_grid.coords[k_safe] if key_grid.num_voxels else np.zeros(k_idx.shape + (3,), np.int64)
            keys.append((kf, kc, k_mask))
            totals.append(int(k_n.sum()))

        y = attend(feats[q_safe], coords[q_safe], keys, w, q_mask).astype(np.float32)
        upd_idx = q_idx[q_mask]
        upd_feats = y[q_mask]

        interp_idx = np.zeros(0, dtype=np.int64)
        interp_feats = np.zeros((0, feats.shape[1]), dtype=np.float32)
        if knn_k is not None:
            rest = sel & ~is_query
            u_idx = pad_segments(members[rest], local[member_win[rest]], n_b)
            u_mask = u_idx != EMPTY
            if u_mask.any():
                u_safe = np.maximum(u_idx, 0)
                vals = knn_interpolate_padded(coords[u_safe], u_mask, coords[q_safe],
                                              q_mask.sum(axis=1), y, knn_k)
                interp_idx = u_idx[u_mask]
                interp_feats = vals[u_mask].astype(np.float32)
        return upd_idx, upd_feats, interp_idx, interp_feats, totals

    results = _run(process, _chunks(active, cfg.chunk_windows), workers)
    cat = lambda i, empty: np.concatenate([r[i] for r in results]) if results else empty  # noqa: E731
    c = feats.shape[1]
    key_totals = [sum(r[4][m] for r in results) for m in range(len(cfg.key_windows))]
    return (
        cat(0, np.zeros(0, np.int64)), cat(1, np.zeros((0, c), np.float32)),
        cat(2, np.zeros(0, np.int64)), cat(3, np.zeros((0, c), np.float32)),
        key_totals,
    )


def mssvt_block_forward(
    grid: SparseVoxelGrid,
    block_index: int,
    cfg: PipelineConfig,
    w: BlockWeights,
    workers: int = 1,
) -> tuple[SparseVoxelGrid, BlockStats]:
    """Apply one block; coordinates are untouched, features replaced."""
    spec = ChessboardSpec.from_config(cfg.cbs_rate, cfg.cbs_axes)
    symbol = block_index % spec.period
    stats = BlockStats(block_index, symbol, key_counts=[0] * cfg.num_groups)
    if grid.num_voxels == 0:
        return grid.with_features(grid.features.copy()), stats
    if grid.channels != w.channels:
        raise ValueError(f"grid has {grid.channels} channels, block expects {w.channels}")

    windows = partition_query_windows(grid, cfg.query_window)
    query_mask = chessboard_symbols(grid.coords, spec) == symbol
    knn_k = None if spec.rate is None else cfg.knn_k
    upd_idx, upd, int_idx, interp, key_totals = attend_query_windows(
        grid, windows, query_mask, grid, cfg, w, knn_k, workers
    )
    out = grid.features.copy()
    out[upd_idx] = upd
    out[int_idx] = interp

    stats.num_windows = len(windows)
    stats.active_windows = int(np.unique(windows.voxel_window[upd_idx]).size)
    stats.num_queries = int(upd_idx.size)
    stats.num_interpolated = int(int_idx.size)
    stats.num_passthrough = grid.num_voxels - stats.num_queries - stats.num_interpolated
    stats.key_counts = key_totals
    if stats.num_passthrough:
        log.debug("block %d: %d voxels passed through (window without symbol-%d voxels)",
                  block_index, stats.num_passthrough, symbol)
    return grid.with_features(out), stats


def backbone_forward(
    grid: SparseVoxelGrid,
    cfg: PipelineConfig,
    blocks: list[BlockWeights],
    workers: int = 1,
) -> tuple[SparseVoxelGrid, list[BlockStats]]:
    """Run ``cfg.num_blocks`` blocks with block indices 0, 1, ... feeding the symbol cycle."""
    if len(blocks) < cfg.num_blocks:
        raise ValueError(f"{cfg.num_blocks} blocks configured, {len(blocks)} weight sets given")
    stats = []
    for t in range(cfg.num_blocks):
        grid, s = mssvt_block_forward(grid, t, cfg, blocks[t], workers)
        stats.append(s)
    return grid, stats
