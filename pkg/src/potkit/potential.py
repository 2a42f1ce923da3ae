"""Exit times, Green functions, harmonic extensions, capacities and equilibrium measures.

Conventions
-----------
``pi`` is the lattice invariant distribution (``sum(pi) == 1``) and
``mu = pi / h^d`` its density. The chain Green matrix ``G = (-M_D)^{-1}``
holds expected occupation times; the Green density is ``g_D = G / h^d`` so
that ``sum_y g_D(x, y) h^d`` is the mean exit time from ``x``.

Pair computations (``A``, ``B``) use the generator fitted to both regions
(see :func:`~potkit.operator.fit_boundaries`); the fitted generator travels
with the :class:`HarmonicExtension` so later identities reuse it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .grid import RegionMask, TorusGrid
from .operator import DomainError, GeneratorMatrix, InvariantDensity, dual_generator, fit_boundaries


class SeparationError(ValueError):
    pass


class PositivityError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ExitTimeField:
    values: np.ndarray
    domain: RegionMask
    provenance: str = "primal"
    report: linalg.SolveReport | None = None

    def at(self, cell: int) -> float:
        return float(self.values[cell])


@dataclass(frozen=True, eq=False)
class GreenColumn:
    """``g_D(., source)`` as a density, zero outside ``domain``."""

    source: int
    values: np.ndarray
    domain: RegionMask
    provenance: str = "primal"


@dataclass(frozen=True, eq=False)
class HarmonicExtension:
    values: np.ndarray
    A: RegionMask
    B: RegionMask
    generator: GeneratorMatrix
    report: linalg.SolveReport | None = None


@dataclass(frozen=True, eq=False)
class EquilibriumMeasure:
    weights: np.ndarray
    mass: float
    extension: HarmonicExtension


@dataclass(frozen=True)
class CapacityResult:
    energy: float
    flux: float
    mismatch: float
    provenance: str = "primal"
    separation: float = 0.0

    @property
    def value(self) -> float:
        return self.flux


@dataclass(frozen=True)
class IdentityReport:
    """Outcome of one numerical identity or inequality check.

    ``value`` is the worst residual (or violation) and ``passed`` compares
    it with ``threshold``.
    """

    name: str
    value: float
    threshold: float
    passed: bool
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "threshold": self.threshold,
                "passed": self.passed, "details": self.details}


def _check_killed(Mkilled: GeneratorMatrix, D: RegionMask):
    if not Mkilled.killed or not np.array_equal(Mkilled.cells, D.indices):
        raise DomainError("generator is not the killed submatrix on D")


def _embed(grid: TorusGrid, cells, local) -> np.ndarray:
    out = np.zeros(grid.size)
    out[cells] = local
    return out


def exit_time(Mkilled: GeneratorMatrix, D: RegionMask, tol: float | None = None) -> ExitTimeField:
    """Mean exit time from ``D``: solves ``M_D u = -1``, zero outside ``D``."""
    _check_killed(Mkilled, D)
    u, report = linalg.solve(Mkilled.matrix, -np.ones(D.count), tol=tol)
    return ExitTimeField(_embed(D.grid, D.indices, u), D, Mkilled.provenance, report)


def green_column(Mkilled: GeneratorMatrix, D: RegionMask, y: int,
                 tol: float | None = None) -> GreenColumn:
    """Column ``g_D(., y)`` of the Green density for source cell ``y``."""
    _check_killed(Mkilled, D)
    y = int(y)
    if not D.member[y]:
        raise DomainError(f"source outside domain: cell {y} is not in D")
    rhs = np.zeros(D.count)
    rhs[np.searchsorted(D.indices, y)] = -1.0
    v, _ = linalg.solve(Mkilled.matrix, rhs, tol=tol)
    return GreenColumn(y, _embed(D.grid, D.indices, v) / D.grid.cell_volume, D, Mkilled.provenance)


def green_matrix(Mkilled: GeneratorMatrix) -> np.ndarray:
    """Dense chain Green matrix ``(-M_D)^{-1}`` on the cells of ``D`` (small domains only).

    Columns are ordered like ``Mkilled.cells``. Divide by ``h^d`` for the density.
    """
    if not Mkilled.killed:
        raise DomainError("green_matrix needs a killed generator")
    G, _ = linalg.solve(-Mkilled.matrix, np.eye(Mkilled.size), method="direct")
    return G


def separation(A: RegionMask, B: RegionMask) -> float:
    """Smallest centre-to-centre torus distance between cells of ``A`` and ``B``."""
    from scipy.spatial import KDTree

    grid = A.grid
    # the nearest pair always involves boundary cells of both regions
    pa = grid.centers[A.inner_boundary]
    pb = grid.centers[B.inner_boundary]
    tree = KDTree(np.mod(pb, grid.length), boxsize=grid.length)
    dist, _ = tree.query(np.mod(pa, grid.length))
    return float(dist.min())


def _check_separated(A: RegionMask, B: RegionMask):
    if A.count == 0 or B.count == 0:
        raise SeparationError("regions not separated: A and B must be nonempty")
    if np.any(A.member & B.member) or np.any(A.outer_boundary & B.member):
        raise SeparationError("regions not separated: A and B need at least one cell layer between them")


def harmonic_extension(M: GeneratorMatrix, A: RegionMask, B: RegionMask, fitted: bool = True,
                       tol: float | None = None) -> HarmonicExtension:
    """Probability of reaching ``A`` before ``B``.

    Solves ``M h = 0`` off ``A`` and ``B`` with ``h = 1`` on ``A`` and ``h = 0``
    on ``B``. The constrained cells are eliminated (equivalent to replacing
    their rows by identity rows). Values are clipped to ``[0, 1]``, which only
    removes solver round-off since the discrete maximum principle holds.
    """
    if M.killed:
        raise ValueError("harmonic extension needs the generator on the whole torus")
    _check_separated(A, B)
    Mf = fit_boundaries(M, [A, B]) if fitted else M
    free = ~(A.member | B.member)
    cells = np.flatnonzero(free)
    # coupling of each free cell into A moves to the right-hand side
    rhs = -np.sum(Mf.rates[cells] * A.member[M.grid.neighbors[cells]], axis=1)
    local, report = linalg.solve(Mf.restrict(cells).matrix, rhs, tol=tol)
    h = A.member.astype(float)
    h[cells] = np.clip(local, 0.0, 1.0)
    return HarmonicExtension(h, A, B, Mf, report)


def equilibrium_measure(M: GeneratorMatrix, pi: InvariantDensity, A: RegionMask, B: RegionMask,
                        extension: HarmonicExtension | None = None) -> EquilibriumMeasure:
    """``nu = -(M h) pi`` on ``A``, zero elsewhere.

    Raises
    ------
    PositivityError
        If some weight is below ``-1e-12`` (relative to the largest weight).
    """
    ext = extension if extension is not None else harmonic_extension(M, A, B)
    flow = -ext.generator.apply(ext.values) * pi.pi
    nu = np.where(A.member, flow, 0.0)
    if nu.min() < -1e-12 * max(nu.max(), 1e-300):
        raise PositivityError(f"equilibrium positivity violated: min weight {nu.min():.3e}")
    return EquilibriumMeasure(nu, float(nu.sum()), ext)


def capacity(M: GeneratorMatrix, pi: InvariantDensity, A: RegionMask, B: RegionMask,
             extension: HarmonicExtension | None = None) -> CapacityResult:
    """Capacity between ``A`` and ``B`` as energy ``-<h, M h>_pi`` and as flux out of ``A``."""
    ext = extension if extension is not None else harmonic_extension(M, A, B)
    Mh = ext.generator.apply(ext.values)
    energy = float(-np.sum(ext.values * Mh * pi.pi))
    flux = float(-np.sum(Mh[A.member] * pi.pi[A.member]))
    mismatch = abs(energy - flux) / abs(flux)
    return CapacityResult(energy, flux, mismatch, M.provenance, separation(A, B))


def representation_check(nu: EquilibriumMeasure, Bc: RegionMask, M: GeneratorMatrix | None,
                         pi: InvariantDensity, tol: float = 1e-8) -> IdentityReport:
    """Rebuild ``h`` from ``nu`` through the Green function of ``Bc``.

    ``r = G_{Bc} (nu / pi)`` should equal ``h`` on ``Bc`` off ``A`` and 1 on
    ``A``. ``M`` defaults to the (fitted) generator stored with the extension.
    """
    ext = nu.extension
    M = ext.generator if M is None else M
    cells = Bc.indices
    source = nu.weights[cells] / pi.pi[cells]
    r_local, _ = linalg.solve(-M.restrict(cells).matrix, source)
    r = _embed(Bc.grid, cells, r_local)
    A = ext.A.member
    off = Bc.member & ~A
    err_off = float(np.abs(r[off] - ext.values[off]).max()) if off.any() else 0.0
    err_on = float(np.abs(r[A] - 1.0).max())
    worst = max(err_off, err_on)
    return IdentityReport("representation", worst, tol, worst <= tol,
                          {"max_error_off_A": err_off, "max_error_on_A": err_on})


def annulus_extrema_check(g: GreenColumn, U: RegionMask, V: RegionMask | None = None,
                          rtol: float = 1e-9) -> IdentityReport:
    """Where a Green column takes its extremes relative to a sub-region ``U``.

    Away from the source ``g`` is harmonic, so its minimum over ``U`` minus
    the source is attained on the inner boundary of ``U``, and its maximum
    over ``V \\ U`` is attained next to ``U`` and does not exceed the maximum
    over the inner boundary of ``U``.
    """
    V = g.domain if V is None else V
    if not np.all(V.member[U.member]):
        raise ValueError("U must be contained in V")
    if not U.member[g.source]:
        raise ValueError("source must lie in U")
    vals = g.values
    scale = float(np.abs(vals).max())
    if scale == 0 or np.ptp(vals[V.member]) <= rtol * scale:
        return IdentityReport("annulus-extrema", np.inf, rtol, False, {"degenerate": True})
    punctured = U.member.copy()
    punctured[g.source] = False
    inner = U.inner_boundary & punctured
    min_all = float(vals[punctured].min())
    min_inner = float(vals[inner].min())
    shell = V.member & ~U.member
    near = shell & U.outer_boundary
    max_shell = float(vals[shell].max()) if shell.any() else 0.0
    max_near = float(vals[near].max()) if near.any() else 0.0
    max_inner = float(vals[U.inner_boundary].max())
    violations = [
        (min_inner - min_all) / scale,
        (max_shell - max_near) / scale,
        (max_shell - max_inner) / scale,
    ]
    worst = max(0.0, *violations)
    return IdentityReport("annulus-extrema", worst, rtol, worst <= rtol, {
        "degenerate": False, "min_punctured_U": min_all, "min_inner_boundary": min_inner,
        "max_outside_U": max_shell, "max_next_to_U": max_near, "max_inner_boundary": max_inner,
    })


def dirichlet_solve(M: GeneratorMatrix, D: RegionMask, data, tol: float | None = None) -> np.ndarray:
    """Solve ``M u = 0`` on ``D`` with ``u = data`` outside ``D``; returns the full-grid ``u``.

    ``data`` may hold several boundary data sets as columns (shape
    ``(size, k)``); they share one sparse factorization.
    """
    data = np.asarray(data, dtype=float)
    cells = D.indices
    nbr = M.grid.neighbors[cells]
    outside = ~D.member[nbr]
    if data.ndim == 1:
        rhs = -np.sum(M.rates[cells] * np.where(outside, data[nbr], 0.0), axis=1)
        local, _ = linalg.solve(M.restrict(cells).matrix, rhs, tol=tol)
    else:
        weights = M.rates[cells] * outside
        rhs = -np.einsum("ck,ckt->ct", weights, data[nbr])
        local, _ = linalg.solve(M.restrict(cells).matrix, rhs, method="direct")
    u = np.where(D.member[:, None] if data.ndim == 2 else D.member, 0.0, data)
    u[cells] = local
    return u


def maximum_principle_check(M: GeneratorMatrix, D: RegionMask, trials: int = 100, seed: int = 0,
                            rtol: float = 1e-9) -> IdentityReport:
    """Random nonnegative Dirichlet data on the outer boundary layer of ``D``.

    Each solution must stay between the smallest and largest boundary
    value; the report holds the largest excursion relative to the data range.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    layer = D.outer_boundary
    worst = 0.0
    for _ in range(trials):
        data = np.zeros(D.grid.size)
        data[layer] = rng.uniform(0.0, 1.0, size=int(layer.sum()))
        u = dirichlet_solve(M, D, data)
        lo, hi = data[layer].min(), data[layer].max()
        inside = u[D.member]
        excess = max(inside.max() - hi, lo - inside.min(), 0.0) / max(hi - lo, 1e-300)
        worst = max(worst, float(excess))
    return IdentityReport("maximum-principle", worst, rtol, worst <= rtol,
                          {"trials": trials, "seed": seed, "boundary_cells": int(layer.sum())})


def identity_suite(M: GeneratorMatrix, pi: InvariantDensity, D: RegionMask, A: RegionMask,
                   B: RegionMask, tol: float = 1e-8, trials: int = 20, seed: int = 0) -> list[IdentityReport]:
    """Every exact discrete identity on one domain ``D`` and one pair ``(A, B)``.

    ``B`` is normally the complement of a ball containing ``A``.
    """
    from .operator import killed_submatrix

    reports = []
    MD = killed_submatrix(M, D, fitted=True)
    G = green_matrix(MD)
    u = exit_time(MD, D)
    row = G.sum(axis=1)
    err = float(np.abs(row - u.values[D.indices]).max() / np.abs(u.values).max())
    reports.append(IdentityReport("green-exit-time", err, tol, err <= tol))

    MD_star = dual_generator(MD, pi)
    G_star = green_matrix(MD_star)
    p = pi.pi[D.indices]
    lhs = p[:, None] * G_star
    rhs = (p[:, None] * G).T
    err = float(np.abs(lhs - rhs).max() / np.abs(rhs).max())
    reports.append(IdentityReport("duality", err, tol, err <= tol))

    ext = harmonic_extension(M, A, B)
    cap = capacity(M, pi, A, B, ext)
    M_star = dual_generator(M, pi)
    cap_star = capacity(M_star, pi, A, B)
    err = abs(cap.flux - cap_star.flux) / cap.flux
    reports.append(IdentityReport("capacity-adjoint", err, tol, err <= tol,
                                  {"cap": cap.flux, "cap_dual": cap_star.flux}))

    nu = equilibrium_measure(M, pi, A, B, ext)
    err = max(cap.mismatch, abs(nu.mass - cap.flux) / cap.flux)
    reports.append(IdentityReport("energy-flux-mass", err, tol, err <= tol,
                                  {"energy": cap.energy, "flux": cap.flux, "nu_mass": nu.mass}))

    reports.append(representation_check(nu, B.complement(), None, pi, tol))
    reports.append(maximum_principle_check(M, D, trials=trials, seed=seed))
    return reports


def write_field_csv(path, grid: TorusGrid, values, name: str = "value") -> None:
    """One row per cell: multi-index, centre coordinates, value."""
    idx = grid.unravel(np.arange(grid.size))
    cols = [f"i{k}" for k in range(grid.d)] + [f"x{k}" for k in range(grid.d)] + [name]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for m, c, v in zip(idx, grid.centers, np.asarray(values, dtype=float)):
            fh.write(",".join([*map(str, m), *(repr(float(t)) for t in c), repr(float(v))]) + "\n")


def write_gnuplot_slice(path, grid: TorusGrid, values, coord: float | None = None, axis: int = 2) -> None:
    """Plane of cells with fixed coordinate ``coord`` along ``axis``, in ``splot`` block format."""
    if grid.d < 3:
        raise ValueError("slices need d >= 3")
    coord = grid.length / 2 if coord is None else coord
    k = min(int(np.mod(coord, grid.length) / grid.h), grid.n - 1)
    cube = np.asarray(values, dtype=float).reshape(grid.shape)
    plane = np.take(cube, k, axis=axis)
    while plane.ndim > 2:
        plane = plane[..., grid.n // 2]
    centres = (np.arange(grid.n) + 0.5) * grid.h
    free = [a for a in range(grid.d) if a != axis][:2]
    with open(path, "w") as fh:
        fh.write(f"# x{free[0]} x{free[1]} value  (x{axis} = {float(centres[k])!r})\n")
        for i in range(grid.n):
            for j in range(grid.n):
                fh.write(f"{float(centres[i])!r} {float(centres[j])!r} {float(plane[i, j])!r}\n")
            fh.write("\n")
