"""Closed-form periodic coefficient families ``(a, b)`` for ``div(a grad) + b.grad``.

Every family uses a diagonal diffusion matrix, so the field exposes the
diagonal directly (``a_diag``) alongside the full matrix (``a``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

FAMILIES = ("laplace", "aniso-diag", "smooth-var", "rotation-drift", "shear-drift", "gradient-drift")


class EllipticityError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Diffusion and drift coefficients, evaluated on arrays of points ``(N, d)``.

    ``div_a`` returns ``sum_j d_j a_ij``, the correction needed when the
    operator is written in non-divergence form (used by the SDE sampler).
    """

    name: str
    params: dict
    d: int
    length: float
    lam: float
    a_diag: Callable[[np.ndarray], np.ndarray]
    b: Callable[[np.ndarray], np.ndarray]
    div_a: Callable[[np.ndarray], np.ndarray]
    potential: Callable[[np.ndarray], np.ndarray] | None = field(default=None)

    def a(self, points) -> np.ndarray:
        diag = self.a_diag(np.atleast_2d(points))
        out = np.zeros(diag.shape + (self.d,))
        idx = np.arange(self.d)
        out[:, idx, idx] = diag
        return out

    def describe(self) -> dict:
        return {"family": self.name, "params": dict(self.params), "lambda": self.lam}


def _zeros(d):
    return lambda x: np.zeros((np.atleast_2d(x).shape[0], d))


def _const_diag(diag):
    diag = np.asarray(diag, dtype=float)
    return lambda x: np.broadcast_to(diag, (np.atleast_2d(x).shape[0], diag.size)).copy()


def builtin_field(name: str, d: int = 3, length: float = 1.0, **params) -> CoefficientField:
    """Instantiate one of the builtin coefficient families.

    Parameters
    ----------
    name : str
        One of ``laplace``, ``aniso-diag`` (``diag``), ``smooth-var``
        (``eps``), ``rotation-drift`` (``strength``), ``shear-drift``
        (``strength``) or ``gradient-drift`` (``strength``).
    d, length : int, float
        Dimension and period of the torus the field lives on.
    """
    if name not in FAMILIES:
        raise ValueError(f"unknown coefficient family {name!r}; choose from {', '.join(FAMILIES)}")
    k = 2 * np.pi / length
    zero = _zeros(d)

    if name == "laplace":
        if params:
            raise ValueError(f"laplace takes no parameters, got {sorted(params)}")
        return CoefficientField(name, {}, d, length, 1.0, _const_diag(np.ones(d)), zero, zero)

    if name == "aniso-diag":
        diag = tuple(float(v) for v in params.pop("diag", (1.0,) * d))
        _no_extra(name, params)
        if len(diag) != d:
            raise ValueError(f"aniso-diag needs {d} diagonal entries, got {len(diag)}")
        if min(diag) <= 0:
            raise EllipticityError(f"ellipticity violated: diagonal {diag} not positive")
        return CoefficientField(name, {"diag": diag}, d, length, min(diag), _const_diag(diag), zero, zero)

    if name == "smooth-var":
        eps = float(params.pop("eps", 0.5))
        _no_extra(name, params)
        if not 0 <= eps < 1:
            raise EllipticityError(f"ellipticity violated: smooth-var needs 0 <= eps < 1, got {eps}")

        def scalar(x):
            return 1.0 + eps * np.prod(np.sin(k * x), axis=1)

        def a_diag(x):
            x = np.atleast_2d(x)
            return np.repeat(scalar(x)[:, None], d, axis=1)

        def div_a(x):
            x = np.atleast_2d(x)
            s, c = np.sin(k * x), np.cos(k * x)
            out = np.empty_like(x)
            for i in range(d):
                others = np.prod(np.delete(s, i, axis=1), axis=1)
                out[:, i] = eps * k * c[:, i] * others
            return out

        return CoefficientField(name, {"eps": eps}, d, length, 1.0 - eps, a_diag, zero, div_a)

    if name == "rotation-drift":
        s = float(params.pop("strength", 2.0))
        _no_extra(name, params)

        # cellular flow in the (x1, x2) plane, stream function sin(k x1) sin(k x2) / k
        def b(x):
            x = np.atleast_2d(x)
            out = np.zeros_like(x, dtype=float)
            out[:, 0] = s * np.sin(k * x[:, 0]) * np.cos(k * x[:, 1])
            out[:, 1] = -s * np.cos(k * x[:, 0]) * np.sin(k * x[:, 1])
            return out

        return CoefficientField(name, {"strength": s}, d, length, 1.0, _const_diag(np.ones(d)), b, zero)

    if name == "shear-drift":
        s = float(params.pop("strength", 1.0))
        _no_extra(name, params)

        def b(x):
            x = np.atleast_2d(x)
            out = np.zeros_like(x, dtype=float)
            out[:, 0] = s * np.sin(k * x[:, 1])
            return out

        return CoefficientField(name, {"strength": s}, d, length, 1.0, _const_diag(np.ones(d)), b, zero)

    # gradient-drift: b = grad V with V = strength * sum_i cos(k x_i)
    s = float(params.pop("strength", 0.5))
    _no_extra(name, params)

    def V(x):
        return s * np.sum(np.cos(k * np.atleast_2d(x)), axis=1)

    def b(x):
        return -s * k * np.sin(k * np.atleast_2d(x))

    return CoefficientField(name, {"strength": s}, d, length, 1.0, _const_diag(np.ones(d)), b, zero, V)


def _no_extra(name, params):
    if params:
        raise ValueError(f"{name} got unexpected parameters {sorted(params)}")


def ellipticity_check(field: CoefficientField, grid, samples: int = 1000, seed: int = 0) -> float:
    """Smallest eigenvalue of ``a`` over ``samples`` random points plus all cell centres.

    Raises
    ------
    EllipticityError
        If the minimum falls below the declared bound ``field.lam``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, field.length, size=(samples, field.d))
    pts = np.concatenate([pts, grid.centers])
    # for diagonal a the minimum of v.a v over unit v is the smallest diagonal entry
    lo = float(field.a_diag(pts).min())
    if lo < field.lam - 1e-12:
        raise EllipticityError(
            f"ellipticity violated for {field.name}: min eigenvalue {lo} < declared {field.lam}"
        )
    return lo
