"""Named oracle-equivalence and invariant checks runnable from the command line.

Each check raises ``AssertionError`` (or any exception) on failure. Checks
are small enough to finish in a few seconds in total.
"""

from __future__ import annotations

import tempfile
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import oracle
from .attention import attend_window, relative_position_index, scale_aware_attention
from .backbone import mssvt_block_forward
from .config import PipelineConfig
from .sampling import ChessboardSpec, chessboard_symbols, farthest_point_sample
from .voting import focal_objectness_loss, vote_objective, vote_objective_grads
from .voxel_hash import build_hash, lookup_many
from .weights import (VoteModuleWeights, init_block, init_vote, init_weights, load_weights,
                      save_weights)
from .windowing import partition_query_windows


@dataclass
class SelftestContext:
    cfg: PipelineConfig = field(default_factory=PipelineConfig)
    weights_path: str | None = None
    seed: int = 0


def _random_grid(rng, n, extent, channels=1):
    extent = tuple(int(e) for e in extent)
    keys = rng.choice(int(np.prod(extent)), size=n, replace=False)
    coords = np.stack(np.unravel_index(keys, extent), axis=1).astype(np.int64)
    feats = rng.normal(size=(n, channels)).astype(np.float32)
    return build_hash(coords, feats, extent)


def _small_cfg(**kw) -> PipelineConfig:
    base = dict(channels=16, heads_per_group=(2, 2), num_keys=None, max_gather=None,
                cbs_rate="off")
    base.update(kw)
    return PipelineConfig(**base)


def _block_with_rpe(cfg, rng):
    w = init_block(cfg, rng)
    for t in w.rpe:
        t[:] = rng.normal(scale=0.1, size=t.shape)
    return w


def check_hash_lookup(ctx):
    rng = np.random.default_rng(ctx.seed)
    grid = _random_grid(rng, 400, (40, 30, 20))
    probes = np.concatenate([grid.coords[:100], rng.integers(0, 20, size=(200, 3))])
    got = lookup_many(grid, probes)
    want = [oracle.linear_scan_lookup(grid.coords, p) for p in probes]
    assert np.array_equal(got, want), "hash lookup differs from linear scan"


def check_window_partition(ctx):
    rng = np.random.default_rng(ctx.seed + 1)
    grid = _random_grid(rng, 500, (30, 30, 12))
    ws = partition_query_windows(grid, (3, 3, 5))
    assert np.array_equal(np.sort(ws.members), np.arange(grid.num_voxels)), "not a partition"
    assert len({tuple(c) for c in ws.centers}) == len(ws), "duplicate window centers"
    ref = oracle.dense_partition(grid.coords, (3, 3, 5))
    assert len(ref) == len(ws)
    for j in range(len(ws)):
        assert sorted(ws.member_list(j)) == sorted(ref[tuple(ws.window_coords[j])])


def check_fps(ctx):
    rng = np.random.default_rng(ctx.seed + 2)
    for _ in range(10):
        n = int(rng.integers(1, 60))
        pts = rng.integers(0, 8, size=(n, 3))
        k = int(rng.integers(1, n + 1))
        assert list(farthest_point_sample(pts, k)) == oracle.dense_fps(pts, k)


def check_chessboard_coverage(ctx):
    rng = np.random.default_rng(ctx.seed + 3)
    coords = rng.integers(0, 50, size=(1000, 3))
    spec = ChessboardSpec.from_config("1/4")
    sym = chessboard_symbols(coords, spec)
    seen = np.zeros(len(coords), dtype=int)
    for t in range(4):
        seen += sym == t % spec.period
    assert np.all(seen == 1), "symbols do not cover each voxel exactly once per cycle"


def check_attention_oracle(ctx):
    rng = np.random.default_rng(ctx.seed + 4)
    cfg = PipelineConfig(channels=64, heads_per_group=(2, 2))
    w = _block_with_rpe(cfg, rng)
    for _ in range(10):
        nq = int(rng.integers(1, 17))
        xq = rng.integers(0, 3, size=(nq, 3))
        fq = rng.normal(size=(nq, 64))
        kc, kf = [], []
        for r in cfg.key_windows:
            nk = int(rng.integers(0, 33))
            kc.append(rng.integers(0, 3, size=(nk, 3)))
            kf.append(rng.normal(size=(nk, 64)))
        got = attend_window(xq, fq, kc, kf, w)
        want = oracle.dense_block_attention(xq, fq, list(zip(kc, kf)), w)
        err = np.abs(got - want).max() / max(np.abs(want).max(), 1e-12)
        assert err < 1e-5, f"relative error {err:.2e}"


def check_softmax_rows(ctx):
    rng = np.random.default_rng(ctx.seed + 5)
    q, k, v = rng.normal(size=(7, 8)), rng.normal(size=(11, 8)), rng.normal(size=(11, 8))
    b = rng.normal(size=(7, 11))
    _, a = scale_aware_attention(q, k, v, b, b, 2, return_weights=True)
    assert np.abs(a.sum(axis=-1) - 1).max() < 1e-6


def check_rpe_translation(ctx):
    rng = np.random.default_rng(ctx.seed + 6)
    xq, xk = rng.integers(0, 3, size=(5, 3)), rng.integers(0, 7, size=(9, 3))
    shift = rng.integers(-100, 100, size=3)
    r = (7, 7, 7)
    assert np.array_equal(relative_position_index(xq, xk, r),
                          relative_position_index(xq + shift, xk + shift, r))


def check_block_oracle(ctx):
    rng = np.random.default_rng(ctx.seed + 7)
    for rate in ("off", "1/4"):
        cfg = _small_cfg(cbs_rate=rate)
        grid = _random_grid(rng, 300, (20, 20, 10), cfg.channels)
        w = _block_with_rpe(cfg, rng)
        got, _ = mssvt_block_forward(grid, 0, cfg, w)
        want = oracle.dense_block_reference(grid, 0, cfg, w)
        err = np.abs(got.features - want).max() / max(np.abs(want).max(), 1e-12)
        assert err < 1e-5, f"rate {rate}: relative error {err:.2e}"


def check_focal_value(ctx):
    v = focal_objectness_loss(np.array([0.5]), np.array([1.0]))
    assert abs(v - 0.04332) <= 1e-5, f"focal loss {v}"


def check_vote_gradients(ctx):
    rng = np.random.default_rng(ctx.seed + 8)
    w32 = init_vote(6, 5, rng)
    w = VoteModuleWeights(**{k: v.astype(np.float64) for k, v in w32.tensors().items()})
    f = rng.normal(size=(9, 6))
    target = rng.normal(size=(9, 3))
    fg = rng.random(9) < 0.5
    fg[0] = True
    grads = vote_objective_grads(f, w, target, fg)
    h = 1e-4
    for name in ("off_w1", "obj_w1", "off_b2", "obj_w2"):
        arr = getattr(w, name)
        for i in range(min(arr.size, 6)):
            old = arr.flat[i]
            arr.flat[i] = old + h
            up = vote_objective(f, w, target, fg)
            arr.flat[i] = old - h
            down = vote_objective(f, w, target, fg)
            arr.flat[i] = old
            num = (up - down) / (2 * h)
            ana = grads[name].flat[i]
            assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-6), f"{name}[{i}]"


def check_weights_load(ctx):
    if ctx.weights_path is not None:
        load_weights(ctx.weights_path, ctx.cfg)
        return
    cfg = _small_cfg(num_blocks=1)
    w = init_weights(cfg, ctx.seed)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "w.bin"
        save_weights(w, path)
        back = load_weights(path, cfg)
    for name, arr in w.tensors().items():
        assert np.array_equal(arr, back.tensors()[name]), f"tensor {name} changed in round trip"


CHECKS: dict[str, Callable[[SelftestContext], None]] = {
    "hash.lookup_vs_scan": check_hash_lookup,
    "windowing.partition": check_window_partition,
    "sampling.fps_vs_oracle": check_fps,
    "sampling.chessboard_coverage": check_chessboard_coverage,
    "attention.dense_oracle": check_attention_oracle,
    "attention.softmax_rows": check_softmax_rows,
    "attention.rpe_translation": check_rpe_translation,
    "backbone.block_vs_dense": check_block_oracle,
    "voting.focal_value": check_focal_value,
    "voting.gradients": check_vote_gradients,
    "weights.load": check_weights_load,
}


@dataclass
class CheckResult:
    name: str
    ok: bool
    message: str = ""


def run_selftest(ctx: SelftestContext, name_filter: str | None = None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if name_filter and name_filter not in name:
            continue
        try:
            fn(ctx)
            results.append(CheckResult(name, True))
        except Exception as exc:  # any failure is reported against the check's name
            msg = str(exc) or type(exc).__name__
            if not isinstance(exc, AssertionError):
                msg = f"{type(exc).__name__}: {msg}"
            results.append(CheckResult(name, False, msg))
            traceback.clear_frames(exc.__traceback__)
    return results
