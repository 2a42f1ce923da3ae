import numpy as np
import pytest

from conftest import CENTER, setup
from potkit.coeffs import builtin_field
from potkit.grid import BallSpec, RegionMask, TorusGrid, make_ball_mask
from potkit.operator import (
    DomainError,
    assemble_generator,
    dual_generator,
    fit_boundaries,
    invariant_density,
    killed_submatrix,
    write_matrix_market,
)

K = 2 * np.pi


def continuum_apply(field, x):
    """L u for u = sin(2 pi x_0) + sin(2 pi x_1) from the field's own coefficients."""
    a, da, b = field.a_diag(x), field.div_a(x), field.b(x)
    out = np.zeros(len(x))
    for i in (0, 1):
        du, d2u = K * np.cos(K * x[:, i]), -K**2 * np.sin(K * x[:, i])
        out += a[:, i] * d2u + (da[:, i] + b[:, i]) * du
    return out


def consistency_error(family, n, scheme, **params):
    g = TorusGrid(3, n)
    f = builtin_field(family, **params)
    M = assemble_generator(f, g, scheme)
    u = np.sin(K * g.centers[:, 0]) + np.sin(K * g.centers[:, 1])
    return np.abs(M.matrix @ u - continuum_apply(f, g.centers)).max()


@pytest.mark.parametrize("family", ["laplace", "aniso-diag", "smooth-var", "rotation-drift",
                                    "shear-drift", "gradient-drift"])
def test_generator_structure(family):
    _, _, M, _, _ = setup(family, 8)
    A = M.matrix
    off = A - np.diag(A.diagonal())
    assert off.min() >= 0
    assert np.all(A.diagonal() < 0)
    np.testing.assert_allclose(M.row_sums(), 0, atol=1e-12 * np.abs(A.diagonal()).max())


def test_laplace_seven_point_stencil():
    _, _, M, _, _ = setup("laplace", 8)
    A = M.matrix.toarray()
    assert np.all(np.diag(A) == -384.0)
    assert set(np.unique(A[~np.eye(512, dtype=bool)])) == {0.0, 64.0}
    assert np.all((A > 0).sum(axis=1) == 6)
    np.testing.assert_array_equal(A, A.T)


def test_unknown_scheme_and_dimension_mismatch():
    with pytest.raises(ValueError):
        assemble_generator(builtin_field("laplace"), TorusGrid(3, 8), "spectral")
    with pytest.raises(ValueError):
        assemble_generator(builtin_field("laplace", 2), TorusGrid(3, 8))


@pytest.mark.parametrize("family,params", [("smooth-var", {}), ("rotation-drift", {}), ("gradient-drift", {})])
def test_central_scheme_is_second_order(family, params):
    ratio = consistency_error(family, 16, "central", **params) / consistency_error(family, 32, "central", **params)
    assert 3.4 <= ratio <= 4.6


def test_upwind_scheme_is_first_order_with_drift():
    ratio = consistency_error("shear-drift", 16, "upwind") / consistency_error("shear-drift", 32, "upwind")
    assert 1.6 <= ratio <= 2.6


@pytest.mark.parametrize("family", ["laplace", "rotation-drift", "shear-drift"])
def test_invariant_density_uniform_for_divergence_free_fields(family):
    g, _, _, pi, _ = setup(family, 16)
    np.testing.assert_allclose(pi.pi, 1 / g.size, rtol=1e-9)
    np.testing.assert_allclose(pi.mu, 1.0, rtol=1e-9)


def test_invariant_density_properties():
    g, _, M, pi, _ = setup("gradient-drift", 16)
    assert pi.pi.sum() == pytest.approx(1.0, abs=1e-14)
    assert pi.pi.min() > 0
    assert pi.residual <= 1e-10
    res = np.abs(M.matrix.T @ pi.pi).max() / (np.abs(M.diag).max() * pi.pi.max())
    assert res <= 1e-10
    assert pi.mass(np.ones(g.size, dtype=bool)) == pytest.approx(1.0)


def test_gradient_drift_density_converges_to_gibbs():
    devs = []
    for n in (8, 16, 32):
        g, f, _, pi, _ = setup("gradient-drift", n)
        gibbs = np.exp(f.potential(g.centers))
        gibbs /= gibbs.mean()
        devs.append(np.abs(np.log(pi.mu / gibbs)).max())
    assert devs[0] > devs[1] > devs[2]


def test_invariant_density_rejects_killed_and_central():
    _, f, M, _, _ = setup("laplace", 8)
    with pytest.raises(ValueError):
        invariant_density(M.restrict(np.arange(10)))
    with pytest.raises(ValueError):
        invariant_density(assemble_generator(f, M.grid, "central"))


def test_rotation_dual_is_reversed_flow():
    g, f, M, pi, dual = setup("rotation-drift", 16)
    reversed_flow = assemble_generator(builtin_field("rotation-drift", strength=-f.params["strength"]), g)
    np.testing.assert_allclose(dual.matrix.toarray(), reversed_flow.matrix.toarray(), atol=1e-9)


@pytest.mark.parametrize("family", ["laplace", "smooth-var", "shear-drift", "gradient-drift"])
def test_dual_is_a_generator_with_same_density(family):
    g, f, M, _, _ = setup(family, 16)
    pi = invariant_density(M, tol=1e-13)
    dual = dual_generator(M, pi)
    rel = np.abs(dual.row_sums()).max() / np.abs(dual.diag).max()
    assert rel <= 1e-12
    assert (dual.matrix - np.diag(dual.matrix.diagonal())).min() >= 0
    # pi-weighted adjointness
    u, v = np.random.default_rng(0).random((2, g.size))
    lhs = np.dot(pi.pi * (M.matrix @ u), v)
    rhs = np.dot(pi.pi * u, dual.matrix @ v)
    assert lhs == pytest.approx(rhs, rel=1e-12)
    assert dual.provenance == "dual"
    assert dual_generator(dual, pi).provenance == "primal"


def test_dual_of_dual_is_original():
    _, _, M, pi, dual = setup("gradient-drift", 16)
    back = dual_generator(dual, pi)
    np.testing.assert_allclose(back.rates, M.rates, rtol=1e-12)


def test_analytic_dual_converges_to_discrete():
    errs = []
    for n in (8, 16, 32):
        _, _, M, pi, dual = setup("gradient-drift", n)
        analytic = dual_generator(M, pi, mode="analytic")
        errs.append(np.abs(analytic.rates - dual.rates).max() / np.abs(dual.diag).max())
    assert errs[0] > errs[1] > errs[2]


def test_dual_mode_errors():
    _, _, M, pi, _ = setup("laplace", 8)
    with pytest.raises(ValueError):
        dual_generator(M, pi, mode="transpose")


def test_killed_single_cell():
    g, _, M, _, _ = setup("laplace", 8)
    K1 = killed_submatrix(M, RegionMask.from_cells(g, [17]))
    assert K1.matrix.toarray().tolist() == [[-384.0]]


def test_killed_degenerate_domains():
    g, _, M, _, _ = setup("laplace", 8)
    with pytest.raises(DomainError, match="degenerate domain"):
        killed_submatrix(M, RegionMask.from_cells(g, []))
    with pytest.raises(DomainError, match="degenerate domain"):
        killed_submatrix(M, RegionMask.from_cells(g, np.arange(g.size)))


@pytest.mark.parametrize("fitted", [False, True])
def test_killed_rows_lose_mass_only_on_inner_boundary(fitted):
    g, _, M, _, _ = setup("shear-drift", 16)
    D = make_ball_mask(g, BallSpec(CENTER, 0.3))
    Mk = killed_submatrix(M, D, fitted=fitted)
    sums = Mk.row_sums()
    inner = D.inner_boundary[D.indices]
    assert np.all(sums[inner] < 0)
    np.testing.assert_allclose(sums[~inner], 0, atol=1e-12 * np.abs(Mk.diag).max())


def test_fitting_preserves_row_sums_and_signs():
    g, _, M, _, _ = setup("rotation-drift", 16)
    ball = make_ball_mask(g, BallSpec(CENTER, 0.2))
    F = fit_boundaries(M, [ball])
    assert np.all(F.rates >= M.rates)
    np.testing.assert_allclose(F.rates.sum(axis=1) + F.diag, 0, atol=1e-9)
    changed = np.any(F.rates != M.rates, axis=1)
    near = ball.inner_boundary | ball.outer_boundary
    assert np.all(near[changed])
    with pytest.raises(ValueError):
        fit_boundaries(M.restrict(ball.indices), [ball])


def test_apply_vanishes_on_constants():
    _, _, M, _, _ = setup("gradient-drift", 16)
    assert np.all(M.apply(np.full(M.size, 3.7)) == 0)


def test_matrix_market_export(tmp_path):
    _, _, M, _, _ = setup("laplace", 8)
    path = tmp_path / "M.mtx"
    write_matrix_market(M, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("%%MatrixMarket matrix coordinate real general")
    assert lines[1] == f"512 512 {M.matrix.nnz}"
    import scipy.io
    np.testing.assert_array_equal(scipy.io.mmread(path).toarray(), M.matrix.toarray())
