"""Sparse storage and Krylov solves for killed-generator systems.

Matrices are SciPy CSR arrays with canonical (sorted, duplicate-free) index
structure, so a CSR product sums each row in ascending column order.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DEFAULT_TOL = 1e-10
DEFAULT_MAXITER = 20000
DEFAULT_RESTART = 50

SparseMatrix = sp.csr_matrix

_options = {"tol": DEFAULT_TOL, "maxiter": DEFAULT_MAXITER, "restart": DEFAULT_RESTART}


@contextmanager
def solver_options(**overrides):
    """Temporarily change the defaults used by :func:`solve` (``tol``, ``maxiter``, ``restart``)."""
    unknown = set(overrides) - set(_options)
    if unknown:
        raise ValueError(f"unknown solver options {sorted(unknown)}")
    saved = dict(_options)
    _options.update({k: v for k, v in overrides.items() if v is not None})
    try:
        yield dict(_options)
    finally:
        _options.clear()
        _options.update(saved)


class SolverError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    residual: float
    wall_time: float
    method: str = "gmres"


def as_sparse(A) -> sp.csr_matrix:
    """Canonical CSR copy of ``A`` (sorted indices, duplicates summed)."""
    A = sp.csr_matrix(A, dtype=float, copy=True)
    A.sum_duplicates()
    A.sort_indices()
    return A


def transpose(A) -> sp.csr_matrix:
    return as_sparse(sp.csr_matrix(A).T)


def solve(A, rhs, tol: float | None = None, maxiter: int | None = None,
          restart: int | None = None, method: str = "gmres", x0=None):
    """Solve ``A x = rhs`` with Jacobi-preconditioned restarted GMRES.

    Parameters
    ----------
    A : sparse matrix, square and nonsingular
    rhs : ndarray
        One right-hand side, or a 2-D array whose columns are solved in turn.
    tol : float, optional
        Relative residual target ``||A x - rhs|| <= tol ||rhs||``.
    maxiter : int, optional
        Cap on total inner iterations.
    restart : int, optional
        GMRES restart length. Unset options come from :func:`solver_options`.
    method : {"gmres", "bicgstab", "direct"}
    x0 : ndarray, optional
        Initial guess (single right-hand side only).

    Returns
    -------
    x : ndarray
    report : SolveReport
        For several right-hand sides the iterations are summed and the
        residual is the worst one.

    Raises
    ------
    SolverError
        On breakdown or when ``maxiter`` is exhausted; the report is attached.
    """
    tol = _options["tol"] if tol is None else tol
    maxiter = _options["maxiter"] if maxiter is None else maxiter
    restart = _options["restart"] if restart is None else restart
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    rhs = np.asarray(rhs, dtype=float)
    if rhs.ndim == 2 and method == "direct":
        start = time.perf_counter()
        x = spla.splu(A.tocsc()).solve(rhs)
        norms = np.maximum(np.linalg.norm(rhs, axis=0), 1e-300)
        residual = float(np.max(np.linalg.norm(A @ x - rhs, axis=0) / norms))
        return x, SolveReport(1, residual, time.perf_counter() - start, method)
    if rhs.ndim == 2:
        cols, reports = [], []
        for j in range(rhs.shape[1]):
            x, rep = solve(A, rhs[:, j], tol, maxiter, restart, method)
            cols.append(x)
            reports.append(rep)
        return np.stack(cols, axis=1), SolveReport(
            sum(r.iterations for r in reports),
            max(r.residual for r in reports),
            sum(r.wall_time for r in reports),
            method,
        )

    start = time.perf_counter()
    bnorm = float(np.linalg.norm(rhs))
    if bnorm == 0.0:
        return np.zeros_like(rhs), SolveReport(0, 0.0, 0.0, method)

    count = [0]

    def tick(_):
        count[0] += 1

    if method == "direct":
        x = spla.spsolve(A.tocsc(), rhs)
        count[0] = 1
        info = 0
    else:
        diag = A.diagonal()
        if np.any(diag == 0):
            raise SolverError("zero on the diagonal; Jacobi preconditioner undefined")
        inv = 1.0 / diag
        prec = spla.LinearOperator(A.shape, matvec=lambda v: inv * v, dtype=float)
        if method == "gmres":
            x, info = spla.gmres(A, rhs, x0=x0, rtol=tol, atol=0.0, restart=restart,
                                 maxiter=max(1, math.ceil(maxiter / restart)), M=prec,
                                 callback=tick, callback_type="pr_norm")
        elif method == "bicgstab":
            x, info = spla.bicgstab(A, rhs, x0=x0, rtol=tol, atol=0.0, maxiter=maxiter, M=prec, callback=tick)
        else:
            raise ValueError(f"unknown method {method!r}")

    residual = float(np.linalg.norm(A @ x - rhs)) / bnorm
    report = SolveReport(count[0], residual, time.perf_counter() - start, method)
    if info != 0 or not residual <= tol * (1 + 1e-6) or not np.all(np.isfinite(x)):
        if method == "gmres" and info == 0 and np.all(np.isfinite(x)):
            # preconditioned residual converged but true residual lags: one more polish pass
            dx, rep2 = solve(A, rhs - A @ x, tol=tol * bnorm / max(residual * bnorm, 1e-300),
                             maxiter=maxiter, restart=restart, method=method)
            x = x + dx
            residual = float(np.linalg.norm(A @ x - rhs)) / bnorm
            report = SolveReport(count[0] + rep2.iterations, residual,
                                 time.perf_counter() - start, method)
            if residual <= tol * (1 + 1e-6):
                return x, report
        raise SolverError(f"solver stagnated (info={info}, residual={residual:.3e})", report)
    return x, report
