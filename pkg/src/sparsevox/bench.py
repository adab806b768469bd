"""Benchmark harness for chessboard-rate sweeps and sparse-vs-dense comparisons.

CSV columns (stable; new columns are only ever appended):

    impl               ``sparse`` or ``dense``
    cbs_rate           ``off``, ``1/2``, ``1/4`` or ``1/8``
    num_voxels         voxels in the input grid
    num_windows        non-empty query windows
    attention_queries  voxels updated by attention in the block
    key_counts         keys gathered per scale, ``;``-separated
    wall_ms            best block-forward wall time over the repeats
    peak_bytes         peak traced allocation during one extra run (0 when disabled)
"""

from __future__ import annotations

import csv
import io
import time
import tracemalloc
from dataclasses import asdict, dataclass, fields

import numpy as np

from .backbone import mssvt_block_forward
from .config import CBS_RATES, PipelineConfig
from .oracle import dense_block_reference, linear_scan_lookup
from .sampling import ChessboardSpec, chessboard_symbols
from .voxel_hash import SparseVoxelGrid, build_hash, lookup_many
from .weights import BlockWeights
from .windowing import partition_query_windows

CSV_COLUMNS = ("impl", "cbs_rate", "num_voxels", "num_windows", "attention_queries",
               "key_counts", "wall_ms", "peak_bytes")


@dataclass
class BenchRow:
    impl: str
    cbs_rate: str
    num_voxels: int
    num_windows: int
    attention_queries: int
    key_counts: str
    wall_ms: float
    peak_bytes: int


def _timed(fn, repeats: int):
    best, result = np.inf, None
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t0)
    return result, best * 1e3


def _peak(fn) -> int:
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def dense_query_count(grid: SparseVoxelGrid, cfg: PipelineConfig, block_index: int = 0) -> int:
    # the dense reference keeps no counters; count symbol matches directly
    spec = ChessboardSpec.from_config(cfg.cbs_rate, cfg.cbs_axes)
    return int((chessboard_symbols(grid.coords, spec) == block_index % spec.period).sum())


def bench_block(grid: SparseVoxelGrid, cfg: PipelineConfig, w: BlockWeights,
                rates=CBS_RATES, dense: bool = False, repeats: int = 1,
                memory: bool = True, workers: int = 1) -> list[BenchRow]:
    """Time one block forward (block index 0) per chessboard rate.

    ``dense`` adds rows for the loop-based reference; it is only feasible on
    small grids.
    """
    rows = []
    num_windows = len(partition_query_windows(grid, cfg.query_window))
    for rate in rates:
        c = cfg.replace(cbs_rate=rate)
        run = lambda: mssvt_block_forward(grid, 0, c, w, workers)  # noqa: E731
        (_, stats), ms = _timed(run, repeats)
        peak = _peak(run) if memory else 0
        rows.append(BenchRow("sparse", rate, grid.num_voxels, num_windows, stats.num_queries,
                             ";".join(str(k) for k in stats.key_counts), round(ms, 3), peak))
        if dense:
            run_d = lambda: dense_block_reference(grid, 0, c, w)  # noqa: E731
            _, ms_d = _timed(run_d, 1)
            peak_d = _peak(run_d) if memory else 0
            rows.append(BenchRow("dense", rate, grid.num_voxels, num_windows,
                                 dense_query_count(grid, c), "", round(ms_d, 3), peak_d))
    return rows


@dataclass
class GatherBench:
    num_voxels: int
    num_probes: int
    sparse_ms: float
    scan_ms: float
    agree: bool


def bench_gather(num_voxels: int = 10_000, extent=(256, 256, 256), num_probes: int = 200,
                 seed: int = 0) -> GatherBench:
    """Hash lookups against a vectorized linear scan over all voxels, same probes.

    ``agree`` additionally checks the hash against the loop-based oracle.
    """
    rng = np.random.default_rng(seed)
    ext = np.asarray(extent)
    keys = rng.choice(int(np.prod(ext)), size=num_voxels, replace=False)
    coords = np.stack(np.unravel_index(keys, extent), axis=1).astype(np.int64)
    grid = build_hash(coords, np.zeros((num_voxels, 1), np.float32), extent)
    half = num_probes // 2
    probes = np.concatenate([coords[rng.integers(0, num_voxels, half)],
                             rng.integers(0, ext, size=(num_probes - half, 3))])
    sparse, sparse_ms = _timed(lambda: lookup_many(grid, probes), 3)
    _, scan_ms = _timed(lambda: [_scan(coords, p) for p in probes], 3)
    oracle = np.array([linear_scan_lookup(coords, p) for p in probes[:50]])
    return GatherBench(num_voxels, num_probes, round(sparse_ms, 3), round(scan_ms, 3),
                       bool(np.array_equal(sparse[:50], oracle)))


def _scan(coords, probe) -> int:
    hit = np.flatnonzero((coords == probe).all(axis=1))
    return int(hit[0]) if hit.size else -1


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(asdict(r))
    return buf.getvalue()


def format_table(rows: list[BenchRow]) -> str:
    names = [f.name for f in fields(BenchRow)]
    cells = [names] + [[str(getattr(r, n)) for n in names] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(names))]
    lines = ["  ".join(v.rjust(wd) for v, wd in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    base = {(r.impl, r.num_voxels): r.wall_ms for r in rows if r.cbs_rate == "off"}
    if base:
        lines.append("")
        for r in rows:
            ref = base.get((r.impl, r.num_voxels))
            if r.cbs_rate != "off" and ref:
                lines.append(f"{r.impl} N={r.num_voxels} {r.cbs_rate}: "
                             f"{100 * (1 - r.wall_ms / ref):.1f}% less wall time than off")
    return "\n".join(lines)
