import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locfuse.grid import PatchGrid, build_neighborhood, grid_from_image, map_coords

from oracles import brute_mask, lattice_count, mapped


def test_grid_from_image():
    g = grid_from_image(336, 336, 14)
    assert (g.rows, g.cols, g.n) == (24, 24, 576)
    assert grid_from_image(48, 48, 8).n == 36
    with pytest.raises(ValueError, match="remainders 11, 11"):
        grid_from_image(336, 336, 13)


def test_coords_raster_order():
    g = PatchGrid(2, 3)
    assert g.coords.tolist() == [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]


def test_map_coords():
    a, b = PatchGrid(24, 24), PatchGrid(12, 12)
    assert map_coords((5, 7), a, a) == (5, 7)
    assert map_coords((0, 0), a, b) == (0, 0)
    assert map_coords((23, 23), a, b) == (11, 11)
    with pytest.raises(ValueError, match="outside"):
        map_coords((24, 0), a, b)


@pytest.mark.parametrize("src,dst", [((24, 24), (12, 12)), ((5, 7), (3, 9)), ((4, 4), (8, 8))])
def test_map_coords_matches_formula(src, dst):
    s, d = PatchGrid(*src), PatchGrid(*dst)
    for p in s.coords:
        assert map_coords(tuple(p), s, d) == mapped(tuple(p), s, d)


def test_interior_counts():
    g = PatchGrid(24, 24)
    u = g.index((12, 12))
    for r, expected in [(1, 5), (2, 13), (3, 29)]:
        assert lattice_count(r) == expected
        assert len(build_neighborhood(g, g, r).neighbors[u]) == expected


def test_corner_and_saturation():
    g = PatchGrid(24, 24)
    assert len(build_neighborhood(g, g, 1).neighbors[0]) == 3
    t = build_neighborhood(g, g, 33)
    assert all(len(v) == 576 for v in t.neighbors)


def test_diagonal_excluded_at_radius_one():
    g = PatchGrid(3, 3)
    assert g.index((0, 0)) not in build_neighborhood(g, g, 1).neighbors[g.index((1, 1))]
    assert g.index((0, 0)) in build_neighborhood(g, g, 2**0.5).neighbors[g.index((1, 1))]


@pytest.mark.parametrize("q,k", [((6, 6), (6, 6)), ((6, 4), (3, 8)), ((4, 4), (8, 8))])
@pytest.mark.parametrize("r", [0, 1, 1.5, 2, 3])
def test_table_matches_brute_force(q, k, r):
    qg, kg = PatchGrid(*q), PatchGrid(*k)
    t = build_neighborhood(qg, kg, r)
    np.testing.assert_array_equal(t.dense_mask(), brute_mask(qg, kg, r))
    for vs in t.neighbors:
        assert list(vs) == sorted(set(vs))


def test_padded_and_scatter():
    g = PatchGrid(4, 4)
    t = build_neighborhood(g, g, 1)
    idx, valid = t.padded
    assert idx.shape == (16, 5)
    assert valid.sum() == t.counts().sum()
    np.testing.assert_array_equal(np.asarray(t.scatter.sum(axis=1)).ravel(), t.dense_mask().sum(axis=0))


def test_build_is_pure():
    g = PatchGrid(5, 5)
    assert build_neighborhood(g, g, 2) == build_neighborhood(g, g, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.floats(0, 5), st.floats(0, 5))
def test_symmetry_and_monotonicity(rows, cols, r1, r2):
    g = PatchGrid(rows, cols)
    lo, hi = sorted((r1, r2))
    m_lo = build_neighborhood(g, g, lo).dense_mask()
    m_hi = build_neighborhood(g, g, hi).dense_mask()
    np.testing.assert_array_equal(m_lo, m_lo.T)
    assert np.all(m_hi[m_lo])


def test_interior_count_law_vs_enumeration():
    g = PatchGrid(15, 15)
    u = g.index((7, 7))
    for r in np.arange(0, 7.01, 0.25):
        assert len(build_neighborhood(g, g, r).neighbors[u]) == lattice_count(r)


def test_negative_radius_rejected():
    g = PatchGrid(2, 2)
    with pytest.raises(ValueError):
        build_neighborhood(g, g, -1)
