import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from potkit.grid import (
    BallSpec,
    GeometryError,
    RegionMask,
    TorusGrid,
    complement_mask,
    default_centers,
    make_ball_mask,
    minimum_image,
    torus_distance,
)

coords = st.floats(min_value=0.0, max_value=0.999, allow_nan=False)
points3 = st.tuples(coords, coords, coords)


def brute_distance(p, q, length=1.0):
    p, q = np.asarray(p), np.asarray(q)
    shifts = itertools.product((-length, 0.0, length), repeat=len(p))
    return min(np.linalg.norm(p - q + np.array(s)) for s in shifts)


def test_grid_basics():
    g = TorusGrid(3, 8)
    assert g.h == 0.125
    assert g.size == 512
    assert g.centers.shape == (512, 3)
    np.testing.assert_allclose(g.centers[0], [0.0625] * 3)
    assert g.ravel(g.unravel(np.arange(g.size))).tolist() == list(range(g.size))


@pytest.mark.parametrize("args", [(1, 8), (3, 4), (3, 8, 0.0), (3, 8, -1.0)])
def test_grid_rejects_bad_parameters(args):
    with pytest.raises(GeometryError):
        TorusGrid(*args)


def test_neighbors_match_index_arithmetic():
    g = TorusGrid(3, 8)
    idx = g.unravel(np.arange(g.size))
    for k in range(6):
        axis, sign = k // 2, 1 if k % 2 == 0 else -1
        shifted = idx.copy()
        shifted[:, axis] = (shifted[:, axis] + sign) % g.n
        assert np.array_equal(g.neighbors[:, k], g.ravel(shifted))


def test_cell_of_wraps():
    g = TorusGrid(3, 8)
    assert g.cell_of((1.01, 0.0, 0.0)) == g.cell_of((0.01, 0.0, 0.0))
    assert g.cell_of((0.5, 0.5, 0.5)) == g.ravel([4, 4, 4])


def test_torus_distance_examples():
    g = TorusGrid(3, 8)
    assert torus_distance((0.3, 0.2, 0.1), (0.3, 0.2, 0.1), g) == 0.0
    assert torus_distance((0.05, 0, 0), (0.95, 0, 0), g) == pytest.approx(0.1)


@given(points3, points3)
def test_torus_distance_matches_image_scan(p, q):
    g = TorusGrid(3, 8)
    assert torus_distance(p, q, g) == pytest.approx(brute_distance(p, q), abs=1e-12)


@given(points3, points3, points3)
def test_torus_distance_is_a_metric(p, q, r):
    g = TorusGrid(3, 8)
    dpq = torus_distance(p, q, g)
    assert dpq == pytest.approx(torus_distance(q, p, g), abs=1e-15)
    assert dpq <= torus_distance(p, r, g) + torus_distance(r, q, g) + 1e-12
    assert dpq <= np.sqrt(3) / 2 + 1e-12


def test_minimum_image_range():
    d = minimum_image(np.linspace(-3, 3, 101), 1.0)
    assert np.all(d >= -0.5) and np.all(d < 0.5)


def test_ball_mask_membership_from_geometry():
    g = TorusGrid(3, 16)
    ball = BallSpec((0.5, 0.5, 0.5), 0.25)
    m1, m2 = make_ball_mask(g, ball), make_ball_mask(g, ball)
    assert np.array_equal(m1.member, m2.member)
    dist = np.array([brute_distance(c, ball.center) for c in g.centers])
    assert np.array_equal(m1.member, dist < 0.25)


def test_ball_mask_wraps_around_the_torus():
    g = TorusGrid(3, 16)
    m = make_ball_mask(g, BallSpec((0.0, 0.0, 0.0), 0.2))
    assert m.member[g.cell_of((0.97, 0.97, 0.97))]
    assert m.member[g.cell_of((0.03, 0.03, 0.03))]


def test_ball_mask_errors():
    g = TorusGrid(3, 16)
    with pytest.raises(GeometryError, match="wrapping ball"):
        make_ball_mask(g, BallSpec((0.5,) * 3, 0.5))
    with pytest.raises(GeometryError, match="under-resolved region"):
        make_ball_mask(g, BallSpec((0.5,) * 3, 0.1))
    with pytest.raises(GeometryError):
        BallSpec((0.5,) * 3, 0.0)


def test_boundaries_partition_the_region():
    g = TorusGrid(3, 16)
    m = make_ball_mask(g, BallSpec((0.4, 0.5, 0.6), 0.3))
    nb_inside = m.member[g.neighbors]
    inner, interior = m.inner_boundary, m.interior
    assert np.array_equal(inner | interior, m.member)
    assert not np.any(inner & interior)
    assert np.all(~nb_inside[inner].all(axis=1))
    assert np.all(nb_inside[interior].all(axis=1))
    outer = m.outer_boundary
    assert not np.any(outer & m.member)
    assert np.all(nb_inside[outer].any(axis=1))


def test_complement_flips_geometry():
    g = TorusGrid(3, 16)
    m = make_ball_mask(g, BallSpec((0.5,) * 3, 0.2))
    c = complement_mask(m)
    assert np.array_equal(c.member, ~m.member)
    assert c.geometry[1] is False
    assert np.array_equal(c.inner_boundary, m.outer_boundary)


def test_crossing_fraction_hits_the_sphere():
    g = TorusGrid(3, 32)
    ball = BallSpec((0.5, 0.5, 0.5), 0.2)
    m = make_ball_mask(g, ball)
    cells, faces = np.nonzero(~m.member[:, None] & m.member[g.neighbors])
    theta = m.crossing_fraction(cells, faces)
    assert np.all((theta > 0) & (theta <= 1))
    step = np.zeros((len(cells), 3))
    step[np.arange(len(cells)), faces // 2] = np.where(faces % 2 == 0, g.h, -g.h)
    hit = g.centers[cells] + theta[:, None] * step
    np.testing.assert_allclose(np.linalg.norm(hit - 0.5, axis=1), 0.2, atol=1e-12)


def test_crossing_fraction_without_geometry_is_one():
    g = TorusGrid(3, 8)
    m = RegionMask.from_cells(g, [0])
    assert np.all(m.crossing_fraction([1, 2], [1, 0]) == 1.0)


def test_default_centers():
    g = TorusGrid(3, 16)
    cs = default_centers(g)
    assert len(cs) == 5
    assert cs[0] == (0.5, 0.5, 0.5)
    assert (0.625, 0.5, 0.5) in cs and (0.5, 0.375, 0.5) in cs


@settings(max_examples=25, deadline=None)
@given(st.floats(0.13, 0.45), points3)
def test_mask_is_pure_function_of_geometry(radius, center):
    g = TorusGrid(3, 16)
    ball = BallSpec(center, radius)
    m = make_ball_mask(g, ball)
    expected = ball.signed_distance(g.centers, 1.0) < 0
    assert np.array_equal(m.member, expected)
