"""Finite-volume Markov generators for ``div(a grad) + b.grad`` on the torus.

A generator is stored in stencil form: ``rates[x, k]`` is the jump rate from
cell ``x`` through face ``k`` (see :class:`~potkit.grid.TorusGrid`) and
``diag[x]`` the diagonal entry. For a conservative generator
``diag = -rates.sum(1)``; killing shows up as ``diag + rates.sum(1) < 0``.
The CSR matrix is built on demand, restricted to ``cells`` when the
generator has been killed outside a domain.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import linalg
from .coeffs import CoefficientField, ellipticity_check
from .grid import RegionMask, TorusGrid, complement_mask

SCHEMES = ("upwind", "central")
THETA_MIN = 1e-2


class StationarityError(RuntimeError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    grid: TorusGrid
    rates: np.ndarray
    diag: np.ndarray
    scheme: str = "upwind"
    field: CoefficientField | None = None
    cells: np.ndarray | None = None
    provenance: str = "primal"

    @property
    def size(self) -> int:
        return self.grid.size if self.cells is None else len(self.cells)

    @property
    def killed(self) -> bool:
        return self.cells is not None

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        grid = self.grid
        cells = np.arange(grid.size) if self.cells is None else self.cells
        pos = np.full(grid.size, -1, dtype=np.int64)
        pos[cells] = np.arange(len(cells))
        rows, cols, vals = [np.arange(len(cells))], [np.arange(len(cells))], [self.diag[cells]]
        nbr = grid.neighbors[cells]
        for k in range(2 * grid.d):
            target = pos[nbr[:, k]]
            keep = target >= 0
            rows.append(np.flatnonzero(keep))
            cols.append(target[keep])
            vals.append(self.rates[cells[keep], k])
        A = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(cells), len(cells)),
        )
        A.sum_duplicates()
        A.sort_indices()
        return A

    def killing(self) -> np.ndarray:
        """Per-cell killing rate of the unrestricted stencil (0 for a conservative generator)."""
        return -(self.diag + self.rates.sum(axis=1))

    def apply(self, u) -> np.ndarray:
        """Apply the unrestricted generator to a full-grid vector, in difference form.

        Writing ``(Mu)(x) = sum_k rates[x,k] (u(y_k) - u(x)) - killing(x) u(x)``
        makes the result exactly zero wherever ``u`` is constant on the stencil
        and the row is conservative.
        """
        u = np.asarray(u, dtype=float)
        diff = u[self.grid.neighbors] - u[:, None]
        return np.sum(self.rates * diff, axis=1) - self.killing() * u

    def restrict(self, cells) -> "GeneratorMatrix":
        return replace(self, cells=np.asarray(cells, dtype=np.int64))

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()


@dataclass(frozen=True, eq=False)
class DualGeneratorMatrix(GeneratorMatrix):
    construction: str = "discrete-adjoint"


@dataclass(frozen=True, eq=False)
class InvariantDensity:
    grid: TorusGrid
    pi: np.ndarray
    residual: float = 0.0
    iterations: int = 0

    @property
    def mu(self) -> np.ndarray:
        """Density with respect to Lebesgue measure (``pi / h^d``)."""
        return self.pi / self.grid.cell_volume

    def mass(self, mask) -> float:
        member = mask.member if isinstance(mask, RegionMask) else np.asarray(mask, dtype=bool)
        return float(self.pi[member].sum())


def _face_points(grid: TorusGrid, axis: int) -> np.ndarray:
    pts = np.array(grid.centers)
    pts[:, axis] += grid.h / 2
    return pts


def _stencil(grid: TorusGrid, a_faces: np.ndarray, beta: np.ndarray | None,
             b_cells: np.ndarray | None, scheme: str) -> np.ndarray:
    """Jump rates from face diffusivities and drift.

    ``a_faces[x, i]`` and ``beta[x, i]`` live on the ``+e_i`` face of ``x``;
    ``b_cells`` is the drift at cell centres (central scheme only).
    """
    h = grid.h
    nbr = grid.neighbors
    rates = np.zeros((grid.size, 2 * grid.d))
    for i in range(grid.d):
        plus, minus = 2 * i, 2 * i + 1
        up = nbr[:, plus]
        rates[:, plus] += a_faces[:, i] / h**2
        rates[up, minus] += a_faces[:, i] / h**2
        if scheme == "upwind" and beta is not None:
            rates[:, plus] += np.maximum(beta[:, i], 0.0) / h
            rates[up, minus] += np.maximum(-beta[:, i], 0.0) / h
        elif scheme == "central" and b_cells is not None:
            rates[:, plus] += b_cells[:, i] / (2 * h)
            rates[:, minus] -= b_cells[:, i] / (2 * h)
    return rates


def _face_coefficients(field: CoefficientField, grid: TorusGrid):
    a_faces = np.empty((grid.size, grid.d))
    beta = np.empty((grid.size, grid.d))
    for i in range(grid.d):
        pts = _face_points(grid, i)
        a_faces[:, i] = field.a_diag(pts)[:, i]
        beta[:, i] = field.b(pts)[:, i]
    return a_faces, beta


def assemble_generator(field: CoefficientField, grid: TorusGrid, scheme: str = "upwind") -> GeneratorMatrix:
    """Finite-volume generator with face-midpoint diffusivities.

    The diffusion term is a difference of face fluxes. The drift uses the
    normal velocity at each face midpoint, upwinded (``scheme="upwind"``), or
    centred differences of the cell-centre drift (``scheme="central"``).
    Face velocities make the discrete divergence of a divergence-free drift
    vanish whenever its face samples telescope, as for the builtin flows.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    if field.d != grid.d or not np.isclose(field.length, grid.length):
        raise ValueError(
            f"field lives on a {field.d}-torus of side {field.length}, grid is {grid.d}-d of side {grid.length}"
        )
    ellipticity_check(field, grid, samples=64)
    a_faces, beta = _face_coefficients(field, grid)
    b_cells = field.b(grid.centers) if scheme == "central" else None
    rates = _stencil(grid, a_faces, beta, b_cells, scheme)
    return GeneratorMatrix(grid, rates, -rates.sum(axis=1), scheme, field)


def invariant_density(M: GeneratorMatrix, tol: float = 1e-10, shift: float | None = None,
                      maxiter: int = 200, solver_tol: float = 1e-2) -> InvariantDensity:
    """Stationary distribution by shifted inverse power iteration on ``M^T``.

    Iterates ``(sigma I - M^T) w = pi_k``, ``pi_{k+1} = w / sum(w)`` from the
    uniform vector until the scaled residual
    ``max|M^T pi| / (max|diag| * max pi)`` is at most ``tol``. Inner solves
    are inexact (relative accuracy ``solver_tol``); only the outer residual
    decides convergence.
    """
    if M.killed:
        raise ValueError("invariant density needs the generator on the whole torus")
    if M.scheme != "upwind":
        raise ValueError("invariant density requires the upwind (Markov) scheme")
    MT = linalg.transpose(M.matrix)
    scale = float(np.abs(M.diag).max())
    N = M.size

    def residual(p):
        return float(np.abs(MT @ p).max() / (scale * np.abs(p).max()))

    pi = np.full(N, 1.0 / N)
    res = residual(pi)
    it = 0
    if res > tol:
        if shift is None:
            lam = M.field.lam if M.field is not None else 1.0
            # about half the continuum spectral gap: well conditioned, still a fast contraction
            shift = 0.5 * lam * (2 * np.pi / M.grid.length) ** 2
        A = (MT - shift * sp.identity(N, format="csr")).tocsr()
        while res > tol:
            it += 1
            if it > maxiter:
                raise StationarityError(f"stationarity solve failed: residual {res:.3e} after {maxiter} iterations")
            # shift sits right of the spectrum of M^T, so (shift I - M^T) is a nonsingular M-matrix
            # w = pi/shift + c, where pi/shift is exact once pi is stationary; the
            # correction only needs a loose relative accuracy for the outer loop to contract
            c, _ = linalg.solve(A, -(MT @ pi) / shift, tol=solver_tol)
            w = pi / shift + c
            pi = w / w.sum()
            res = residual(pi)
    if np.any(pi <= 0):
        raise StationarityError(f"positivity violated: min pi = {pi.min():.3e}")
    pi = pi / pi.sum()
    return InvariantDensity(M.grid, pi, res, it)


def dual_generator(M: GeneratorMatrix, pi: InvariantDensity, mode: str = "discrete-adjoint") -> DualGeneratorMatrix:
    """Generator of the time-reversed chain with respect to ``pi``.

    ``discrete-adjoint`` gives ``diag(pi)^-1 M^T diag(pi)`` exactly, also for
    a killed generator (its restriction is the adjoint of the restriction).
    ``analytic`` re-assembles the continuum dual operator with drift
    ``(2/mu) a grad(mu) - b``, ``mu`` taken from ``pi`` and differenced across
    each face.
    """
    grid = M.grid
    p = pi.pi
    nbr = grid.neighbors
    if mode == "discrete-adjoint":
        rates = np.empty_like(M.rates)
        for k in range(2 * grid.d):
            y = nbr[:, k]
            rates[:, k] = p[y] * M.rates[y, k ^ 1] / p
        return DualGeneratorMatrix(grid, rates, M.diag.copy(), M.scheme, M.field, M.cells,
                                   _flip(M.provenance), construction=mode)
    if mode != "analytic":
        raise ValueError(f"unknown dual construction {mode!r}")
    if M.field is None:
        raise ValueError("analytic dual needs the coefficient field")
    field = M.field
    a_faces, beta = _face_coefficients(field, grid)
    mu = pi.mu
    if M.scheme == "upwind":
        beta_star = np.empty_like(beta)
        for i in range(grid.d):
            up = mu[nbr[:, 2 * i]]
            grad = (up - mu) / grid.h
            beta_star[:, i] = 2.0 * a_faces[:, i] * grad / (0.5 * (up + mu)) - beta[:, i]
        rates = _stencil(grid, a_faces, beta_star, None, "upwind")
    else:
        a_cells = field.a_diag(grid.centers)
        b_star = np.empty((grid.size, grid.d))
        for i in range(grid.d):
            grad = (mu[nbr[:, 2 * i]] - mu[nbr[:, 2 * i + 1]]) / (2 * grid.h)
            b_star[:, i] = 2.0 * a_cells[:, i] * grad / mu - field.b(grid.centers)[:, i]
        rates = _stencil(grid, a_faces, None, b_star, "central")
    dual = DualGeneratorMatrix(grid, rates, -rates.sum(axis=1), M.scheme, field, None,
                               _flip(M.provenance), construction=mode)
    return dual if M.cells is None else dual.restrict(M.cells)


def _flip(provenance: str) -> str:
    return "primal" if provenance == "dual" else "dual"


def fit_boundaries(M: GeneratorMatrix, regions, theta_min: float = THETA_MIN) -> GeneratorMatrix:
    """Rescale edges that cross the boundary of ball-shaped regions.

    For a cell ``x`` outside a region whose neighbour ``y`` lies inside, the
    region boundary cuts the segment from ``x`` to ``y`` at fraction
    ``theta``. Both rates across that face are multiplied by ``1/theta``
    (linear extrapolation of Dirichlet data to the true boundary), and the
    diagonal absorbs the change so row sums are preserved. Regions without
    geometry are left alone. The result is again a generator with
    nonnegative off-diagonal entries.
    """
    if M.killed:
        raise ValueError("fit boundaries before killing")
    grid = M.grid
    rates = M.rates.copy()
    diag = M.diag.copy()
    nbr = grid.neighbors
    for region in regions:
        if region.geometry is None:
            continue
        free = ~region.member
        cells, faces = np.nonzero(free[:, None] & region.member[nbr])
        if len(cells) == 0:
            continue
        theta = region.crossing_fraction(cells, faces)
        scale = 1.0 / np.maximum(theta, theta_min)
        targets = nbr[cells, faces]
        extra_out = (scale - 1.0) * rates[cells, faces]
        extra_in = (scale - 1.0) * rates[targets, faces ^ 1]
        rates[cells, faces] += extra_out
        rates[targets, faces ^ 1] += extra_in
        np.subtract.at(diag, cells, extra_out)
        np.subtract.at(diag, targets, extra_in)
    return replace(M, rates=rates, diag=diag)


def killed_submatrix(M: GeneratorMatrix, D: RegionMask, fitted: bool = False) -> GeneratorMatrix:
    """Generator of the chain killed on leaving ``D``.

    Couplings to cells outside ``D`` are dropped, so boundary rows lose
    mass. With ``fitted=True`` and a ball-shaped ``D`` the dropped rates are
    first rescaled by :func:`fit_boundaries`.
    """
    count = D.count
    if count == 0 or count == D.grid.size:
        raise DomainError("degenerate domain: D must be a nonempty proper subset of the torus")
    if fitted:
        M = fit_boundaries(M, [complement_mask(D)])
    return M.restrict(D.indices)


def write_matrix_market(M: GeneratorMatrix, path) -> None:
    """Matrix Market coordinate file (banner, size line, 1-based ``row col value``)."""
    A = M.matrix.tocoo()
    order = np.lexsort((A.col, A.row))
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for r, c, v in zip(A.row[order], A.col[order], A.data[order]):
            fh.write(f"{r + 1} {c + 1} {float(v)!r}\n")
