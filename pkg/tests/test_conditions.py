import json

import numpy as np
import pytest

from conftest import CENTER, setup
from potkit.coeffs import builtin_field
from potkit.conditions import (
    DEFAULT_RADII,
    ball_family,
    check_C,
    check_E,
    check_G,
    check_harnack,
    check_sandwich,
    comparison_check,
    equivalence_suite,
    telescoping_check,
)
from potkit.grid import BallSpec, GeometryError, RegionMask, TorusGrid, complement_mask, make_ball_mask

SCAN_RADII = (0.1, 0.15, 0.2, 0.25)


@pytest.fixture(scope="module")
def laplace64():
    return setup("laplace", 64)


def centred(radii):
    return [BallSpec(CENTER, r) for r in radii]


def test_green_constant_matches_newtonian_kernel(laplace64):
    _, _, M, _, _ = laplace64
    rep = check_G(M, centred(SCAN_RADII), K=2)
    assert rep.passed
    assert rep.constants["upper"] == pytest.approx(1 / (4 * np.pi), rel=0.10)
    uppers = [r["upper"] for r in rep.rows]
    assert uppers == sorted(uppers)


def test_exit_time_constants_match_closed_form(laplace64):
    _, _, M, _, _ = laplace64
    rep = check_E(M, centred(SCAN_RADII), delta=0.5)
    assert rep.constants["upper"] == pytest.approx(1 / 6, rel=0.03)
    assert rep.constants["lower"] == pytest.approx(8, rel=0.03)


def test_capacity_ratio_near_six(laplace64):
    _, _, M, pi, _ = laplace64
    rep = check_C(M, pi, centred((0.1, 0.15, 0.2, 0.24)), K=2)
    for row in rep.rows:
        assert row["rho"] == pytest.approx(6, rel=0.10)
    assert rep.constants["rho"] <= 10 and rep.constants["inv_rho"] <= 10


def test_capacity_ratio_wrapping_ball():
    g, _, M, pi, _ = setup("laplace", 16)
    with pytest.raises(GeometryError, match="wrapping ball"):
        check_C(M, pi, centred((0.25,)), K=2)
    with pytest.raises(ValueError):
        check_C(M, pi, centred((0.2,)), K=1)


def test_green_condition_needs_three_dimensions():
    g = TorusGrid(2, 16)
    from potkit.operator import assemble_generator
    M = assemble_generator(builtin_field("laplace", 2), g)
    with pytest.raises(ValueError, match="kernel undefined in this dimension"):
        check_G(M, [BallSpec((0.5, 0.5), 0.25)])


def test_argument_checks():
    _, _, M, _, _ = setup("laplace", 16)
    balls = centred((0.25,))
    with pytest.raises(ValueError):
        check_G(M, balls, K=0.5)
    with pytest.raises(ValueError):
        check_E(M, balls, delta=1.0)
    with pytest.raises(ValueError):
        check_harnack(M, balls, delta=0.0)
    with pytest.raises(ValueError):
        check_harnack(M, balls, trials=0)


@pytest.mark.parametrize("family", ["rotation-drift", "shear-drift"])
def test_constants_stable_across_radii(family):
    _, _, M, pi, dual = setup(family, 32)
    balls = centred((0.15, 0.2, 0.24))
    for rep, names in ((check_G(M, balls), ("upper", "lower")),
                       (check_E(dual, balls), ("upper", "lower")),
                       (check_C(M, pi, balls), ("rho",))):
        assert rep.passed
        for name in names:
            vals = [r[name] for r in rep.rows]
            # the Green constants move with the 2h cutoff relative to R; the others are scale free
            spread = 1.6 if rep.tag == "G" else 1.3
            assert max(vals) / min(vals) <= spread, (rep.tag, name, vals)


def test_scan_order_does_not_matter():
    _, _, M, pi, _ = setup("rotation-drift", 16)
    balls = ball_family(M.grid, (0.25, 0.3))
    a = check_E(M, balls)
    b = check_E(M, balls[::-1])
    assert a.as_dict() == b.as_dict()
    json.dumps(a.as_dict())


def test_ball_family_default_centres():
    g = TorusGrid(3, 32)
    balls = ball_family(g)
    assert len(balls) == 5 * len(DEFAULT_RADII)
    assert {b.radius for b in balls} == set(DEFAULT_RADII)


def test_harnack_constant_data_and_laplace_bound():
    g, _, M, pi, _ = setup("laplace", 32)
    D = make_ball_mask(g, BallSpec(CENTER, 0.25))
    from potkit.potential import dirichlet_solve
    u = dirichlet_solve(M, D, np.full(g.size, 0.4))
    np.testing.assert_allclose(u[D.member], 0.4, rtol=1e-9)
    rep = check_harnack(M, centred((0.2, 0.25)), delta=0.5, trials=100, pi=pi)
    assert rep.passed
    assert 1 < rep.constants["ratio"] <= 3.5
    assert rep.constants["ratio_dual"] == pytest.approx(rep.constants["ratio"], rel=1e-6)


def test_harnack_dual_rotation_is_comparable():
    _, _, M, pi, _ = setup("rotation-drift", 32)
    rep = check_harnack(M, centred((0.2,)), trials=50, pi=pi)
    assert rep.passed
    r, rd = rep.constants["ratio"], rep.constants["ratio_dual"]
    assert 0.5 < r / rd < 2


@pytest.mark.parametrize("family", ["laplace", "rotation-drift", "gradient-drift"])
def test_sandwich_holds(family):
    g, _, M, pi, _ = setup(family, 32)
    A = make_ball_mask(g, BallSpec(CENTER, 0.1))
    B = complement_mask(make_ball_mask(g, BallSpec(CENTER, 0.25)))
    rep = check_sandwich(M, pi, A, B)
    assert rep.passed, rep.details
    d = rep.details
    assert d["lower"] < d["inverse_capacity"] < d["upper"]


def test_sandwich_single_cell_region():
    g, _, M, pi, _ = setup("laplace", 16)
    A = RegionMask.from_cells(g, [g.cell_of(CENTER)])
    B = complement_mask(make_ball_mask(g, BallSpec(CENTER, 0.3)))
    assert check_sandwich(M, pi, A, B).passed


@pytest.mark.parametrize("n", [16, 32])
def test_comparison_constant_bounded(n):
    g, _, M, pi, _ = setup("rotation-drift", n)
    A = make_ball_mask(g, BallSpec(CENTER, 0.15))
    B = complement_mask(make_ball_mask(g, BallSpec(CENTER, 0.3)))
    rep = comparison_check(M, pi, A, B, x=g.cell_of(CENTER))
    assert rep.passed
    assert rep.details["low"] <= 1 <= rep.details["high"]
    assert rep.value < 20
    with pytest.raises(ValueError):
        comparison_check(M, pi, A, B, x=0)


def test_telescoping_bound():
    g, _, M, pi, _ = setup("laplace", 32)
    rep = telescoping_check(M, pi, CENTER, (0.1, 0.15, 0.2, 0.3), c=2.0)
    assert rep.passed, rep.details
    assert len(rep.details["rows"]) == 3
    with pytest.raises(ValueError):
        telescoping_check(M, pi, CENTER, (0.2,), c=2.0)


@pytest.mark.slow
def test_equivalence_suite_laplace():
    rep = equivalence_suite(builtin_field("laplace"), TorusGrid(3, 32), centers=[CENTER])
    assert rep.verdict
    assert rep.refined["G"].passed
    assert all(v <= 1.4 for s in rep.stability.values() for v in s.values())
    assert rep.cross["fine"]["within_oscillation"]
    out = rep.as_dict()
    assert out["verdict"] == "pass"
    json.dumps(out)
