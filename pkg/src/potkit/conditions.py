"""Empirical constants of the Green, exit-time, capacity and Harnack conditions.

Each check scans a family of balls and records, per ball, the constants that
make the corresponding two-sided comparison hold on the lattice. A condition
"holds" on a family when every constant is finite and positive; the
equivalence suite adds stability under one grid refinement.

Ball-shaped regions use boundary-fitted killing throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coeffs import CoefficientField
from .grid import BallSpec, GeometryError, RegionMask, TorusGrid, complement_mask, default_centers, make_ball_mask, torus_distance
from .operator import (
    GeneratorMatrix,
    InvariantDensity,
    assemble_generator,
    dual_generator,
    invariant_density,
    killed_submatrix,
)
from .potential import (
    IdentityReport,
    capacity,
    dirichlet_solve,
    exit_time,
    green_column,
    harmonic_extension,
)

DEFAULT_RADII = (0.15, 0.2, 0.24)
STABILITY_FACTOR = 1.4


@dataclass(frozen=True)
class ConditionReport:
    """Per-ball constants of one condition and their worst case over the family.

    ``constants`` maps each constant name (e.g. ``"upper"``) to its maximum
    over the balls; ``rows`` holds the per-ball values ordered by radius,
    then centre.
    """

    tag: str
    family: dict
    rows: list
    constants: dict
    passed: bool
    details: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.constants.values())

    def as_dict(self) -> dict:
        return {"condition": self.tag, "family": self.family, "rows": self.rows,
                "constants": self.constants, "passed": self.passed, "details": self.details}


@dataclass(frozen=True)
class EquivalenceReport:
    C: ConditionReport
    G: ConditionReport
    E_dual: ConditionReport
    refined: dict
    stability: dict
    cross: dict
    verdict: bool

    def as_dict(self) -> dict:
        return {
            "verdict": "pass" if self.verdict else "fail",
            "C": self.C.as_dict(), "G": self.G.as_dict(), "E_dual": self.E_dual.as_dict(),
            "refined": {k: v.as_dict() for k, v in self.refined.items()},
            "stability": self.stability, "cross": self.cross,
        }


def ball_family(grid: TorusGrid, radii=DEFAULT_RADII, centers=None) -> list[BallSpec]:
    """Balls of the given radii around each centre (default: :func:`default_centers`)."""
    centers = default_centers(grid) if centers is None else centers
    return [BallSpec(c, r) for r in radii for c in centers]


def _ordered(balls):
    return sorted(balls, key=lambda b: (b.radius, b.center))


def _finite_positive(values) -> bool:
    values = np.asarray(list(values), dtype=float)
    return bool(np.all(np.isfinite(values)) and np.all(values > 0))


def _family(balls, **extra) -> dict:
    return {"radii": sorted({b.radius for b in balls}),
            "centers": sorted({b.center for b in balls}), **extra}


def _summarise(tag, balls, rows, names, **extra) -> ConditionReport:
    constants = {k: float(max(r[k] for r in rows)) for k in names}
    ok = _finite_positive(r[k] for r in rows for k in names)
    return ConditionReport(tag, _family(balls, **extra), rows, constants, ok)


def check_G(M: GeneratorMatrix, balls, K: float = 2.0) -> ConditionReport:
    """Green function against the Newtonian kernel ``|x0 - y|^(2-d)``.

    The ball is centred on the centre ``x0`` of the cell containing the
    requested centre, which is also the source cell. Cells closer than
    ``2h`` to the source are excluded.

    ``upper = max g r^(d-2)`` over the ball and
    ``lower = max 1 / (g r^(d-2))`` over the ball shrunk by ``K``.
    """
    grid = M.grid
    d = grid.d
    if d < 3:
        raise ValueError(f"kernel undefined in this dimension (d={d})")
    if not K >= 1:
        raise ValueError("K must be >= 1")
    rows = []
    for ball in _ordered(balls):
        src = grid.cell_of(ball.center)
        x0 = tuple(grid.centers[src])
        D = make_ball_mask(grid, BallSpec(x0, ball.radius))
        g = green_column(killed_submatrix(M, D, fitted=True), D, src).values
        r = torus_distance(grid.centers, np.asarray(x0), grid)
        far = D.member & (r >= 2 * grid.h)
        core = far & (r < ball.radius / K)
        if not core.any():
            raise GeometryError(f"shrunken ball of radius {ball.radius / K} has no cells beyond 2h")
        kernel = np.ones_like(r)
        kernel[far] = r[far] ** (2 - d)
        rows.append({
            "radius": ball.radius, "center": ball.center,
            "upper": float(np.max(g[far] / kernel[far])),
            "lower": float(np.max(kernel[core] / g[core])),
        })
    return _summarise("G", balls, rows, ("upper", "lower"), K=K, provenance=M.provenance)


def check_E(M: GeneratorMatrix, balls, delta: float = 0.5) -> ConditionReport:
    """Mean exit time against ``R^2``.

    ``upper = max E[T_B] / R^2`` over the ball, ``lower = max R^2 / E[T_B]``
    over the ball shrunk by ``delta``.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    grid = M.grid
    rows = []
    for ball in _ordered(balls):
        D = make_ball_mask(grid, ball)
        u = exit_time(killed_submatrix(M, D, fitted=True), D).values
        r = torus_distance(grid.centers, np.asarray(ball.center), grid)
        core = D.member & (r < delta * ball.radius)
        if not core.any():
            raise GeometryError(f"ball of radius {delta * ball.radius} contains no cell centre")
        R2 = ball.radius**2
        rows.append({
            "radius": ball.radius, "center": ball.center,
            "upper": float(u[D.member].max() / R2),
            "lower": float(R2 / u[core].min()),
        })
    return _summarise("E", balls, rows, ("upper", "lower"), delta=delta, provenance=M.provenance)


def check_C(M: GeneratorMatrix, pi: InvariantDensity, balls, K: float = 2.0) -> ConditionReport:
    """Capacity against volume: ``rho = cap(B, (KB)^c) R^2 / mu(B)``, reporting ``rho`` and ``1/rho``."""
    if not K > 1:
        raise ValueError("K must be > 1")
    grid = M.grid
    rows = []
    for ball in _ordered(balls):
        A = make_ball_mask(grid, ball)
        outer = make_ball_mask(grid, ball.scaled(K))
        cap = capacity(M, pi, A, complement_mask(outer)).flux
        rho = cap * ball.radius**2 / pi.mass(A)
        rows.append({"radius": ball.radius, "center": ball.center, "capacity": cap,
                     "rho": float(rho), "inv_rho": float(1 / rho)})
    return _summarise("C", balls, rows, ("rho", "inv_rho"), K=K, provenance=M.provenance)


def _harnack_ratios(M, D, core, trials, rng):
    layer = D.outer_boundary
    data = np.zeros((M.grid.size, trials))
    data[layer] = rng.uniform(0.1, 1.0, size=(int(layer.sum()), trials))
    u = dirichlet_solve(M, D, data)[core]
    return u.max(axis=0) / u.min(axis=0)


def check_harnack(M: GeneratorMatrix, balls, delta: float = 0.5, trials: int = 100, seed: int = 0,
                  pi: InvariantDensity | None = None) -> ConditionReport:
    """Harnack ratios ``sup u / inf u`` over the shrunken ball for random positive boundary data.

    Data are uniform in ``[0.1, 1]`` on the outer boundary layer. With ``pi``
    the dual generator is scanned as well, using the same data.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    grid = M.grid
    dual = dual_generator(M, pi) if pi is not None else None
    names = ("ratio",) if dual is None else ("ratio", "ratio_dual")
    rows = []
    for ball in _ordered(balls):
        D = make_ball_mask(grid, ball)
        r = torus_distance(grid.centers, np.asarray(ball.center), grid)
        core = D.member & (r < delta * ball.radius)
        row = {"radius": ball.radius, "center": ball.center}
        for name, gen in zip(names, (M, dual)):
            ratios = _harnack_ratios(gen, D, core, trials, np.random.default_rng(seed))
            row[name] = float(ratios.max())
        rows.append(row)
    report = _summarise("Har", balls, rows, names, delta=delta, trials=trials, seed=seed)
    return report


def check_sandwich(M: GeneratorMatrix, pi: InvariantDensity, A: RegionMask, B: RegionMask) -> IdentityReport:
    """Two-sided bound of ``1/cap(A, B)`` by dual mean exit times from the complement of ``B``.

    ``mu(A) (inf_A E*)^2 / (mu(Bc)^2 sup E*) <= 1/cap <= sup E* / mu(A)``,
    the infimum taken over the boundary cells of ``A``.
    """
    ext = harmonic_extension(M, A, B)
    cap = capacity(M, pi, A, B, ext).flux
    Bc = complement_mask(B)
    dual = dual_generator(ext.generator.restrict(Bc.indices), pi)
    u = exit_time(dual, Bc).values
    mu_A, mu_Bc = pi.mass(A), pi.mass(Bc)
    inf_A = float(u[A.inner_boundary].min())
    sup_all = float(u[Bc.member].max())
    lower = mu_A * inf_A**2 / (mu_Bc**2 * sup_all)
    upper = sup_all / mu_A
    middle = 1.0 / cap
    # relative violation of either inequality, 0 when both hold
    violation = max(0.0, (lower - middle) / middle, (middle - upper) / middle)
    return IdentityReport("sandwich", violation, 0.0, violation <= 0.0, {
        "lower": lower, "inverse_capacity": middle, "upper": upper,
        "mu_A": mu_A, "mu_Bc": mu_Bc, "inf_exit_A": inf_A, "sup_exit": sup_all,
    })


def comparison_check(M: GeneratorMatrix, pi: InvariantDensity, A: RegionMask, B: RegionMask,
                     x: int | None = None) -> IdentityReport:
    """Dual Green column from ``x`` in ``A`` over the boundary of ``A`` against ``mu(x) / cap(A, B)``.

    Reports ``low = inf g* cap / mu(x)`` (at most 1) and ``high = sup g* cap
    / mu(x)`` (at least 1) over the boundary cells of ``A``, and the
    comparison constant ``max(high, 1/low)``.
    """
    ext = harmonic_extension(M, A, B)
    cap = capacity(M, pi, A, B, ext).flux
    x = int(A.indices[len(A.indices) // 2]) if x is None else int(x)
    if not A.member[x]:
        raise ValueError("x must lie in A")
    Bc = complement_mask(B)
    dual = dual_generator(ext.generator.restrict(Bc.indices), pi)
    g = green_column(dual, Bc, x).values
    ratio = g[A.inner_boundary] * cap / pi.mu[x]
    low, high = float(ratio.min()), float(ratio.max())
    const = max(high, 1.0 / low)
    ok = low <= 1.0 + 1e-8 and high >= 1.0 - 1e-8 and np.isfinite(const)
    return IdentityReport("green-capacity-comparison", const, np.inf, bool(ok),
                          {"low": low, "high": high, "x": x, "capacity": cap})


def telescoping_check(M: GeneratorMatrix, pi: InvariantDensity, center, radii, c: float) -> IdentityReport:
    """Growth of the dual Green function across nested balls ``B_0 < B_1 < ... < B_n``.

    For each ``m < n`` compares ``sup`` over the boundary of ``B_m`` of
    ``g*_{B_n}(., x0)`` with ``c mu(x0) sum_{k=m}^{n-1} 1/cap(B_k, B_{k+1}^c)``.
    """
    grid = M.grid
    radii = sorted(radii)
    if len(radii) < 2:
        raise ValueError("need at least two nested radii")
    src = grid.cell_of(center)
    x0 = tuple(grid.centers[src])
    masks = [make_ball_mask(grid, BallSpec(x0, r)) for r in radii]
    inv_caps = [1.0 / capacity(M, pi, masks[k], complement_mask(masks[k + 1])).flux
                for k in range(len(masks) - 1)]
    outer = masks[-1]
    dual = dual_generator(killed_submatrix(M, outer, fitted=True), pi)
    g = green_column(dual, outer, src).values
    rows, worst = [], 0.0
    for m in range(len(masks) - 1):
        lhs = float(g[masks[m].inner_boundary].max())
        bound = pi.mu[src] * sum(inv_caps[m:])
        rows.append({"m": m, "sup_green": lhs, "mu_sum": bound, "implied_c": lhs / bound})
        worst = max(worst, lhs / bound)
    return IdentityReport("telescoping", worst, c, worst <= c, {"rows": rows, "radii": radii})


def _stability(coarse: ConditionReport, fine: ConditionReport) -> dict:
    out = {}
    for name in coarse.constants:
        a, b = coarse.constants[name], fine.constants[name]
        out[name] = float(max(a / b, b / a))
    return out


def _scan(field: CoefficientField, grid: TorusGrid, radii, centers, K, scheme):
    M = assemble_generator(field, grid, scheme)
    pi = invariant_density(M)
    dual = dual_generator(M, pi)
    balls = ball_family(grid, radii, centers)
    return M, pi, dual, balls


def equivalence_suite(field: CoefficientField, grid: TorusGrid, radii=DEFAULT_RADII, K: float = 2.0,
                      centers=None, scheme: str = "upwind") -> EquivalenceReport:
    """Capacity (primal), Green (primal) and exit-time (dual) conditions on ``grid`` and its refinement.

    The exit-time shrink factor is ``1/K``. The verdict requires every
    constant to be finite and positive on both grids and to change by at
    most a factor :data:`STABILITY_FACTOR` under refinement. The dual Green
    constants are recorded next to the primal ones together with the
    oscillation ``max mu / min mu`` that bounds their ratio.
    """
    if grid.d < 3:
        raise ValueError(f"kernel undefined in this dimension (d={grid.d})")
    reports = {}
    cross = {}
    for label, g in (("coarse", grid), ("fine", grid.refined(2))):
        M, pi, dual, balls = _scan(field, g, radii, centers, K, scheme)
        reports[label] = (check_C(M, pi, balls, K), check_G(M, balls, K), check_E(dual, balls, 1.0 / K))
        G_dual = check_G(dual, balls, K)
        spread = float(pi.pi.max() / pi.pi.min())
        gap = max(max(G_dual.constants[k] / reports[label][1].constants[k],
                      reports[label][1].constants[k] / G_dual.constants[k]) for k in G_dual.constants)
        cross[label] = {"n": g.n, "G_dual": G_dual.constants, "mu_oscillation": spread,
                        "G_dual_over_primal": gap, "within_oscillation": bool(gap <= spread * (1 + 1e-9))}
    (C0, G0, E0), (C1, G1, E1) = reports["coarse"], reports["fine"]
    stability = {"C": _stability(C0, C1), "G": _stability(G0, G1), "E_dual": _stability(E0, E1)}
    stable = all(v <= STABILITY_FACTOR for s in stability.values() for v in s.values())
    verdict = bool(stable and all(r.passed for r in (C0, G0, E0, C1, G1, E1)))
    return EquivalenceReport(C0, G0, E0, {"C": C1, "G": G1, "E_dual": E1}, stability, cross, verdict)
