import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_grid
from sparsevox.errors import DuplicateVoxelError, FormatError, OutOfRangeError
from sparsevox.oracle import linear_scan_lookup
from sparsevox.voxel_hash import (EMPTY, build_hash, flatten_key, gather, load_grid, lookup,
                                  lookup_many, probe_lengths, save_grid)


def test_flatten_key_examples():
    assert flatten_key((1, 2, 3), (10, 10, 10)) == 123
    assert flatten_key((1, 2, 3), (10, 10, 10), batch=1) == 1123
    assert flatten_key((0, 0, 0), (10, 10, 10)) == 0


def test_flatten_key_rejects_out_of_extent():
    with pytest.raises(OutOfRangeError):
        flatten_key((10, 0, 0), (10, 10, 10))
    with pytest.raises(OutOfRangeError):
        flatten_key((0, -1, 0), (10, 10, 10))


def test_key_overflow_guard():
    with pytest.raises(OutOfRangeError):
        build_hash(np.zeros((0, 3)), np.zeros((0, 1)), (2**21, 2**21, 2**21 + 1))


def test_empty_table_misses():
    g = build_hash(np.zeros((0, 3)), np.zeros((0, 2)), (4, 4, 4))
    assert g.num_voxels == 0
    assert np.all(g.slot_keys == EMPTY)
    assert lookup(g, (0, 0, 0)) is None


def test_colliding_keys_probe_forward():
    # two voxels -> capacity 4; keys 1 and 5 share slot 1
    g = build_hash(np.array([[0, 0, 1], [0, 0, 5]]), np.array([[1.0], [2.0]]), (10, 10, 10))
    assert g.capacity == 4
    assert g.slot_keys[1] == 1 and g.slot_keys[2] == 5
    assert lookup(g, (0, 0, 1)) == 0
    assert lookup(g, (0, 0, 5)) == 1
    np.testing.assert_array_equal(probe_lengths(g, [[0, 0, 1], [0, 0, 5]]), [1, 2])


def test_wraparound():
    # keys 3 and 7 hash to the last slot of a capacity-4 table
    g = build_hash(np.array([[0, 0, 3], [0, 0, 7]]), np.zeros((2, 1)), (10, 10, 10))
    assert g.slot_keys[3] == 3 and g.slot_keys[0] == 7
    assert lookup(g, (0, 0, 7)) == 1


def test_lookup_edges():
    g = build_hash(np.array([[1, 1, 1]]), np.ones((1, 1)), (4, 4, 4))
    assert lookup(g, (1, 1, 1)) == 0
    assert lookup(g, (2, 1, 1)) is None
    assert lookup(g, (4, 1, 1)) is None  # x == x_max is out of extent
    assert lookup(g, (-1, 1, 1)) is None
    assert lookup(g, (1, 1, 1), batch=1) is None


def test_duplicate_rejected():
    with pytest.raises(DuplicateVoxelError, match=r"\(1, 2, 3\)"):
        build_hash(np.array([[1, 2, 3], [0, 0, 0], [1, 2, 3]]), np.zeros((3, 1)), (4, 4, 4))


def test_gather_variants():
    rng = np.random.default_rng(1)
    g = random_grid(rng, 50, (8, 8, 8), channels=3)
    mask, feats = gather(g, np.full((5, 3), 9))
    assert not mask.any() and feats.shape == (0, 3)
    mask, feats = gather(g, g.coords)
    assert mask.all()
    np.testing.assert_array_equal(feats, g.features)
    probes = np.concatenate([g.coords[:10], rng.integers(0, 8, (40, 3))])
    mask, feats = gather(g, probes)
    per = [lookup(g, p) for p in probes]
    np.testing.assert_array_equal(mask, [p is not None for p in per])
    np.testing.assert_array_equal(feats, g.features[[p for p in per if p is not None]])


def test_ten_thousand_coords_match_index():
    rng = np.random.default_rng(2)
    g = random_grid(rng, 10_000, (64, 64, 64))
    np.testing.assert_array_equal(lookup_many(g, g.coords), np.arange(10_000))


def test_load_factor_bound():
    rng = np.random.default_rng(3)
    for n in (1, 7, 100, 1000):
        g = random_grid(rng, n, (32, 32, 32))
        assert g.capacity >= 2 * n
        assert g.capacity & (g.capacity - 1) == 0


def test_grid_file_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    g = random_grid(rng, 200, (20, 30, 10), channels=5, batch=2)
    g = build_hash(g.coords, g.features, g.extent, 2, (0.1, 0.2, 0.3), (-1.0, 0.0, 2.0))
    save_grid(g, tmp_path / "g.bin")
    back = load_grid(tmp_path / "g.bin")
    assert back.extent == g.extent and back.batch == 2
    assert back.voxel_size == (0.1, 0.2, 0.3) and back.origin == (-1.0, 0.0, 2.0)
    np.testing.assert_array_equal(back.coords, g.coords)
    np.testing.assert_array_equal(back.features, g.features)


def test_grid_file_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE" + b"\0" * 100)
    with pytest.raises(FormatError):
        load_grid(p)
    rng = np.random.default_rng(5)
    save_grid(random_grid(rng, 10, (4, 4, 4)), p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_grid(p)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 2**31 - 1),
    st.tuples(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40)),
    st.integers(0, 400),
)
def test_lookup_matches_linear_scan(seed, extent, n):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, n, extent)
    probes = np.concatenate([g.coords, rng.integers(-2, 42, size=(100, 3))])
    want = [linear_scan_lookup(g.coords, p) for p in probes]
    np.testing.assert_array_equal(lookup_many(g, probes), want)
    # every key sits at or after its home slot with no empty slot in between
    assert np.all(probe_lengths(g, g.coords) <= g.capacity)
