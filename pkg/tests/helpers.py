"""Shared builders for tests."""

import numpy as np

from sparsevox.config import PipelineConfig
from sparsevox.voxel_hash import build_hash
from sparsevox.weights import init_block


def random_grid(rng, n, extent, channels=1, batch=0):
    extent = tuple(int(e) for e in extent)
    n = min(n, int(np.prod(extent)))
    keys = rng.choice(int(np.prod(extent)), size=n, replace=False)
    coords = np.stack(np.unravel_index(keys, extent), axis=1).astype(np.int64)
    feats = rng.normal(size=(n, channels)).astype(np.float32)
    return build_hash(coords, feats, extent, batch)


def small_cfg(**kw):
    base = dict(channels=16, heads_per_group=(2, 2), num_keys=None, max_gather=None,
                cbs_rate="off")
    base.update(kw)
    return PipelineConfig(**base)


def block_with_rpe(cfg, rng, scale=0.1):
    """Seeded block weights with non-zero position tables and FFN biases."""
    w = init_block(cfg, rng)
    for t in w.rpe:
        t[:] = rng.normal(scale=scale, size=t.shape)
    w.ffn_b1[:] = rng.normal(scale=0.1, size=w.ffn_b1.shape)
    w.ffn_b2[:] = rng.normal(scale=0.1, size=w.ffn_b2.shape)
    return w


def rel_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return float(np.abs(got - want).max() / max(np.abs(want).max(), 1e-12))
