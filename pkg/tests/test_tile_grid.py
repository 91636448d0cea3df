import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltastream.tile_grid import (
    FramePlacement,
    GridSpec,
    SphericalBuffer,
    TileCoord,
    expand_tile_mask,
    reduce_to_tiles,
    tile_absmax,
    wrap_tile,
)
from oracles import DictSphere

G44 = GridSpec(2, 2, 4, 4)


def place(tx, ty, h, w):
    return FramePlacement(TileCoord(tx, ty), h, w)


def test_wrap_examples():
    assert wrap_tile(TileCoord(0, 0), G44) == (0, 0)
    assert wrap_tile(TileCoord(5, 2), G44) == (2, 1)
    assert wrap_tile(TileCoord(-1, 0), G44) == (0, 3)


def test_gridspec():
    g = GridSpec(8, 4, 3, 5)
    assert (g.height, g.width) == (24, 20)
    assert g.scaled(1, 1).height == 3
    with pytest.raises(ValueError):
        GridSpec(0, 1, 1, 1)


def test_placement_helpers():
    p = place(-1, 2, 2, 3)
    assert p.coords()[:3] == [TileCoord(-1, 2), TileCoord(0, 2), TileCoord(1, 2)]
    assert p.grown(1) == place(-2, 1, 4, 5)


def test_roundtrip_and_wrapped_roundtrip():
    rng = np.random.default_rng(0)
    buf = SphericalBuffer(G44, 2)
    t = rng.normal(size=(2, 4, 4)).astype(np.float32)
    buf.write_region(place(0, 0, 2, 2), t)
    np.testing.assert_array_equal(buf.read_region(place(0, 0, 2, 2)), t)

    buf = SphericalBuffer(G44, 2)
    ref = DictSphere(4, 4, 2, 2)
    buf.write_region(place(3, 3, 2, 2), t)
    ref.write(3, 3, t)
    np.testing.assert_array_equal(buf.read_region(place(3, 3, 2, 2)), t)
    # storage-level check against the scatter/gather reference
    np.testing.assert_array_equal(buf.read_region(place(0, 0, 4, 4)), ref.read(0, 0, 4, 4))


def test_unwritten_reads_zero():
    assert not SphericalBuffer(G44, 3).read_region(place(-7, 9, 3, 4)).any()


def test_accumulate_examples():
    rng = np.random.default_rng(1)
    buf = SphericalBuffer(G44, 1)
    d = rng.normal(size=(1, 2, 2)).astype(np.float32)
    buf.accumulate_region(place(1, 0, 1, 1), np.zeros_like(d), np.ones((1, 1), bool))
    assert not buf.storage.any()
    buf.accumulate_region(place(1, 0, 1, 1), d)
    buf.accumulate_region(place(1, 0, 1, 1), d)
    np.testing.assert_array_equal(buf.read_region(place(1, 0, 1, 1)), 2 * d)

    buf = SphericalBuffer(G44, 1)
    buf.accumulate_region(place(1, 0, 1, 1), d)
    np.testing.assert_array_equal(buf.read_region(place(1, 0, 1, 1)), d)
    got = buf.read_region(place(0, 0, 1, 2))
    np.testing.assert_array_equal(got[:, :, 2:], d)
    assert not got[:, :, :2].any()


def test_accumulate_mask_skips_tiles():
    buf = SphericalBuffer(G44, 1)
    mask = np.array([[True, False]])
    buf.accumulate_region(place(0, 0, 1, 2), np.ones((1, 2, 4), np.float32), mask)
    got = buf.read_region(place(0, 0, 1, 2))
    assert got[:, :, :2].all() and not got[:, :, 2:].any()
    with pytest.raises(ValueError):
        buf.accumulate_region(place(0, 0, 1, 2), np.ones((1, 2, 4), np.float32), np.ones((2, 2), bool))


def test_extent_errors():
    buf = SphericalBuffer(G44, 1)
    with pytest.raises(ValueError):
        buf.read_region(place(0, 0, 5, 1))
    with pytest.raises(ValueError):
        buf.write_region(place(0, 0, 1, 1), np.zeros((1, 4, 4), np.float32))


def test_reset_examples():
    buf = SphericalBuffer(G44, 2)
    buf.storage[...] = 3.0
    buf.reset_tiles([(1, 2)])
    assert (buf.storage == 0).sum() == 2 * 2 * 2
    buf.reset_tiles([(i, j) for i in range(4) for j in range(4)])
    assert not buf.read_region(place(5, -3, 4, 4)).any()

    buf.storage[...] = 3.0
    buf.reset_tiles([(0, 0)])
    d = np.full((2, 2, 2), 0.5, np.float32)
    buf.accumulate_region(place(0, 0, 1, 1), d)
    np.testing.assert_array_equal(buf.read_region(place(0, 0, 1, 1)), d)
    with pytest.raises(IndexError):
        buf.reset_tiles([(4, 0)])


def test_tile_helpers():
    m = np.array([[True, False]])
    px = expand_tile_mask(m, 2, 3)
    assert px.shape == (2, 6) and px[:, :3].all() and not px[:, 3:].any()
    np.testing.assert_array_equal(reduce_to_tiles(px, 2, 3), m)
    t = np.zeros((2, 2, 4), np.float32)
    t[1, 0, 3] = -5
    assert tile_absmax(t, 2, 2).tolist() == [[0.0, 5.0]]


def test_dump(tmp_path):
    from deltastream.tensor_core import read_tensor

    buf = SphericalBuffer(G44, 1)
    buf.storage[...] = 1.5
    buf.dump(tmp_path / "b.dflx", {(0, 1): TileCoord(5, 4)})
    np.testing.assert_array_equal(read_tensor(tmp_path / "b.dflx"), buf.storage)
    lines = (tmp_path / "b.dflx.tiles.txt").read_text().splitlines()
    assert "0 1 5 4" in lines and "0 0 -" in lines and len(lines) == 16


ops = st.tuples(
    st.sampled_from(["write", "read", "acc", "reset"]),
    st.integers(-12, 12),
    st.integers(-12, 12),
    st.integers(1, 3),
    st.integers(1, 3),
)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.lists(ops, min_size=1, max_size=40), st.integers(0, 9999))
def test_collision_law_vs_dict_reference(rows, cols, seq, seed):
    rng = np.random.default_rng(seed)
    spec = GridSpec(2, 2, rows, cols)
    buf = SphericalBuffer(spec, 1)
    ref = DictSphere(rows, cols, 2, 1)
    for op, tx, ty, h, w in seq:
        h, w = min(h, rows), min(w, cols)
        p = place(tx, ty, h, w)
        data = rng.integers(-4, 5, (1, 2 * h, 2 * w)).astype(np.float32)
        if op == "write":
            buf.write_region(p, data)
            ref.write(tx, ty, data)
        elif op == "acc":
            mask = rng.random((h, w)) < 0.7
            buf.accumulate_region(p, data, mask)
            ref.accumulate(tx, ty, data, mask)
        elif op == "reset":
            local = (ty % rows, tx % cols)
            buf.reset_tiles([local])
            ref.reset(local)
        np.testing.assert_array_equal(buf.read_region(p), ref.read(tx, ty, h, w))


@settings(max_examples=50, deadline=None)
@given(st.integers(-50, 50), st.integers(-50, 50), st.integers(1, 5), st.integers(1, 5))
def test_roundtrip_property(tx, ty, h, w):
    buf = SphericalBuffer(GridSpec(3, 2, 5, 5), 2)
    t = np.random.default_rng(abs(tx * 101 + ty)).normal(size=(2, 3 * h, 2 * w)).astype(np.float32)
    buf.write_region(place(tx, ty, h, w), t)
    np.testing.assert_array_equal(buf.read_region(place(tx, ty, h, w)), t)


def test_accumulate_equals_read_add_write():
    rng = np.random.default_rng(5)
    a, b = SphericalBuffer(G44, 2), SphericalBuffer(G44, 2)
    base = rng.normal(size=(2, 8, 8)).astype(np.float32)
    a.storage[...] = base
    b.storage[...] = base
    p = place(-2, 3, 3, 2)
    d = rng.normal(size=(2, 6, 4)).astype(np.float32)
    a.accumulate_region(p, d)
    b.write_region(p, b.read_region(p) + d)
    np.testing.assert_array_equal(a.storage, b.storage)
