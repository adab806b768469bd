from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_grid
from sparsevox.errors import ConfigError
from sparsevox.oracle import dense_fps, dense_knn
from sparsevox.sampling import (ChessboardSpec, balanced_multiwindow_sample, chessboard_symbol,
                                chessboard_symbols, farthest_point_sample, fps_padded,
                                knn_interpolate, sample_queries_cbs)
from sparsevox.voxel_hash import build_hash
from sparsevox.windowing import gather_window_voxels

QUARTER = ChessboardSpec.from_config("1/4")


def test_symbol_examples():
    assert chessboard_symbol((3, 2, 7), QUARTER) == 2
    for rate in ("1/2", "1/4", "1/8"):
        assert chessboard_symbol((0, 0, 0), ChessboardSpec.from_config(rate)) == 0
    assert [chessboard_symbol(c, QUARTER) for c in [(0, 0, 5), (0, 1, 5), (1, 0, 5), (1, 1, 5)]] == [0, 1, 2, 3]


def test_spec_validation_and_period():
    assert ChessboardSpec.from_config("off").period == 1
    assert ChessboardSpec.from_config("1/8").period == 8
    assert ChessboardSpec.from_config("1/4", "xz").axes == "xz"
    with pytest.raises(ConfigError):
        ChessboardSpec(Fraction(1, 4), "x")
    with pytest.raises(ConfigError):
        ChessboardSpec.from_config("1/3")


def test_cbs_split_all_one_symbol():
    coords = np.array([[0, 1, 0], [2, 1, 0], [0, 3, 4]])  # all symbol 1 at rate 1/4
    members = np.arange(3)
    s, u = sample_queries_cbs(coords, members, 0, QUARTER)
    assert s.size == 0 and list(u) == [0, 1, 2]
    s, u = sample_queries_cbs(coords, members, 1, QUARTER)
    assert list(s) == [0, 1, 2] and u.size == 0
    s, u = sample_queries_cbs(coords, members, 5, QUARTER)  # t mod period
    assert list(s) == [0, 1, 2]


def test_cbs_off_samples_everything():
    coords = np.random.default_rng(0).integers(0, 9, (20, 3))
    s, u = sample_queries_cbs(coords, np.arange(20), 3, ChessboardSpec.from_config("off"))
    assert s.size == 20 and u.size == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["1/2", "1/4", "1/8"]))
def test_cbs_cycle_covers_members_exactly_once(seed, rate):
    rng = np.random.default_rng(seed)
    spec = ChessboardSpec.from_config(rate)
    coords = rng.integers(0, 40, size=(int(rng.integers(1, 200)), 3))
    members = np.arange(len(coords))
    hits = np.zeros(len(coords), dtype=int)
    for t in range(spec.period):
        s, u = sample_queries_cbs(coords, members, t, spec)
        assert np.intersect1d(s, u).size == 0 and s.size + u.size == len(coords)
        hits[s] += 1
    assert np.all(hits == 1)


def test_fully_occupied_plane_is_exact_quarter():
    xy = np.stack(np.meshgrid(np.arange(12), np.arange(10), indexing="ij"), -1).reshape(-1, 2)
    coords = np.column_stack([xy, np.full(len(xy), 3)])
    sym = chessboard_symbols(coords, QUARTER)
    assert all((sym == t).sum() * 4 == len(coords) for t in range(4))


def test_fps_collinear():
    pts = np.column_stack([np.arange(10), np.zeros(10), np.zeros(10)])
    assert list(farthest_point_sample(pts, 2)) == [0, 9]
    # x=4 and x=5 tie at min distance 4; the smaller index wins
    assert list(farthest_point_sample(pts, 3)) == [0, 9, 4]
    assert list(farthest_point_sample(pts, 3)) == dense_fps(pts, 3)


def test_fps_k_at_least_n_returns_all_in_selection_order():
    pts = np.array([[0, 0, 0], [5, 0, 0], [1, 0, 0], [3, 0, 0]])
    got = farthest_point_sample(pts, 10)
    assert sorted(got) == [0, 1, 2, 3]
    assert list(got) == dense_fps(pts, 10) == [0, 1, 3, 2]


def test_fps_edge_cases():
    assert farthest_point_sample(np.zeros((3, 3)), 0).size == 0
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((3, 3)), -1)
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((0, 3)), 2)


def test_fps_seed_is_smallest_coord():
    pts = np.array([[3, 0, 0], [0, 5, 0], [0, 1, 9], [2, 2, 2]])
    assert farthest_point_sample(pts, 1)[0] == 2


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 120), st.integers(0, 130))
def test_fps_matches_oracle(seed, n, k):
    pts = np.random.default_rng(seed).integers(0, 6, size=(n, 3))
    assert list(farthest_point_sample(pts, k)) == dense_fps(pts, k)


def test_fps_padded_rows_independent():
    rng = np.random.default_rng(3)
    rows = [rng.integers(0, 10, (n, 3)) for n in (5, 0, 17, 9)]
    pad = np.zeros((4, 17, 3), np.int64)
    for i, r in enumerate(rows):
        pad[i, : len(r)] = r
    picks, taken = fps_padded(pad, np.array([len(r) for r in rows]), 6)
    for i, r in enumerate(rows):
        # padded path seeds at position 0
        single, _ = fps_padded(r[None], np.array([len(r)]), 6)
        assert list(picks[i, : taken[i]]) == list(single[0, : taken[i]]) if len(r) else taken[i] == 0


def _center_heavy_grid():
    rng = np.random.default_rng(7)
    center = np.array([10, 10, 10])
    near = center - 1 + np.stack(np.meshgrid(np.arange(3), np.arange(3), np.arange(5),
                                             indexing="ij"), -1).reshape(-1, 3) - [0, 0, 1]
    shell = center + rng.integers(-3, 4, size=(400, 3))
    coords = np.unique(np.concatenate([near, shell]), axis=0)
    return build_hash(coords, np.zeros((len(coords), 1)), (24, 24, 24)), center + 0.5


def test_bms_equal_caps_per_scale():
    g, c = _center_heavy_grid()
    keys = balanced_multiwindow_sample(g, c, ((3, 3, 5), (7, 7, 7)), 512, 32)
    assert keys.counts == [32, 32]
    few = balanced_multiwindow_sample(g, c, ((1, 1, 5), (7, 7, 7)), 512, 32)
    assert few.counts == [5, 32]


def test_bms_keeps_local_keys_that_single_window_fps_skips():
    g, c = _center_heavy_grid()
    keys = balanced_multiwindow_sample(g, c, ((3, 3, 5), (7, 7, 7)), 512, 32)
    local = set(gather_window_voxels(g, c, (3, 3, 5)).tolist())
    balanced_local = sum(i in local for i in np.concatenate(keys.indices))
    # baseline: the same key budget drawn by FPS from the large window alone
    big = gather_window_voxels(g, c, (7, 7, 7))
    single = big[farthest_point_sample(g.coords[big], 64)]
    single_local = sum(i in local for i in single)
    assert balanced_local >= 32
    assert single_local < balanced_local / 2


def test_knn_examples():
    out, ok = knn_interpolate([[1, 0, 0]], [[0, 0, 0], [2, 0, 0]], [[0.0], [2.0]], 3)
    assert ok and np.allclose(out, [[1.0]])
    out, ok = knn_interpolate([[5, 5, 5], [0, 1, 0]], [[1, 1, 1]], [[4.0, -1.0]], 3)
    np.testing.assert_allclose(out, [[4.0, -1.0], [4.0, -1.0]])
    out, ok = knn_interpolate([[0, 0, 0]], np.zeros((0, 3)), np.zeros((0, 1)), 3)
    assert out is None and not ok


def test_knn_frozen_value():
    # nearest three at distances 1, 2, 3 carrying 2, 5, 9: (2/1 + 5/2 + 9/3) / (1 + 1/2 + 1/3)
    s = [[1, 0, 0], [0, 2, 0], [3, 0, 0], [0, 0, 4]]
    out, _ = knn_interpolate([[0, 0, 0]], s, [[2.0], [5.0], [9.0], [100.0]], 3)
    assert abs(out[0, 0] - 45 / 11) < 1e-6


def test_knn_tie_prefers_smaller_index():
    s = [[1, 0, 0], [0, 1, 0], [-1, 0, 0]]
    out, _ = knn_interpolate([[0, 0, 0]], s, [[1.0], [2.0], [30.0]], 2)
    assert out[0, 0] == pytest.approx(1.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_knn_matches_oracle(seed, k):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 10, (int(rng.integers(1, 12)), 3))
    u = rng.integers(0, 10, (int(rng.integers(1, 12)), 3))
    f = rng.normal(size=(len(s), 4))
    out, _ = knn_interpolate(u, s, f, k)
    want = np.array([dense_knn(p, s, f, k) for p in u])
    np.testing.assert_allclose(out, want, atol=1e-6)
