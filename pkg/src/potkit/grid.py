"""Periodic cell-centred lattices, ball regions and minimum-image geometry."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class GeometryError(ValueError):
    """Raised when a region cannot be realised on the lattice."""


@dataclass(frozen=True)
class TorusGrid:
    """Cell-centred lattice on the flat torus ``[0, length)^d``.

    Cells are addressed by a C-ordered linear index; ``neighbors[x, k]`` is
    the cell reached from ``x`` through face ``k``, where ``k = 2*i`` is the
    ``+e_i`` face and ``k = 2*i + 1`` the ``-e_i`` face.
    """

    d: int
    n: int
    length: float = 1.0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise GeometryError(f"dimension must be an integer >= 2, got {self.d}")
        if int(self.n) != self.n or self.n < 8:
            raise GeometryError(f"need at least 8 cells per side, got {self.n}")
        if not self.length > 0:
            raise GeometryError(f"side length must be positive, got {self.length}")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "length", float(self.length))

    @property
    def h(self) -> float:
        return self.length / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    def ravel(self, multi) -> np.ndarray:
        multi = np.asarray(multi)
        return np.ravel_multi_index(tuple(np.moveaxis(multi, -1, 0)), self.shape, mode="wrap")

    def unravel(self, index) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(index), self.shape), axis=-1)

    @cached_property
    def centers(self) -> np.ndarray:
        """Cell centres, shape ``(size, d)``."""
        c = (np.arange(self.n) + 0.5) * self.h
        mesh = np.meshgrid(*([c] * self.d), indexing="ij")
        out = np.stack([m.ravel() for m in mesh], axis=1)
        out.flags.writeable = False
        return out

    @cached_property
    def neighbors(self) -> np.ndarray:
        idx = np.arange(self.size).reshape(self.shape)
        cols = []
        for axis in range(self.d):
            cols.append(np.roll(idx, -1, axis=axis).ravel())
            cols.append(np.roll(idx, 1, axis=axis).ravel())
        out = np.stack(cols, axis=1)
        out.flags.writeable = False
        return out

    def cell_of(self, point) -> int:
        """Linear index of the cell containing ``point`` (wrapped onto the torus)."""
        p = np.mod(np.asarray(point, dtype=float), self.length)
        multi = np.minimum((p / self.h).astype(int), self.n - 1)
        return int(self.ravel(multi))

    def refined(self, factor: int = 2) -> "TorusGrid":
        return TorusGrid(self.d, self.n * factor, self.length)


def minimum_image(delta, length: float) -> np.ndarray:
    """Wrap displacement components into ``[-length/2, length/2)``."""
    delta = np.asarray(delta, dtype=float)
    return delta - length * np.floor(delta / length + 0.5)


def torus_distance(p, q, grid: TorusGrid):
    """Euclidean length of the minimum-image displacement between ``p`` and ``q``.

    Broadcasts over leading axes; returns a float for single points.
    """
    diff = minimum_image(np.asarray(p, dtype=float) - np.asarray(q, dtype=float), grid.length)
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return float(dist) if np.ndim(dist) == 0 else dist


@dataclass(frozen=True)
class BallSpec:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.radius > 0:
            raise GeometryError(f"ball radius must be positive, got {self.radius}")
        object.__setattr__(self, "radius", float(self.radius))

    def scaled(self, factor: float) -> "BallSpec":
        return BallSpec(self.center, self.radius * factor)

    def signed_distance(self, points, length: float) -> np.ndarray:
        """Distance to the sphere, negative inside the ball."""
        diff = minimum_image(np.asarray(points, dtype=float) - np.asarray(self.center), length)
        return np.sqrt(np.sum(diff * diff, axis=-1)) - self.radius


@dataclass(frozen=True, eq=False)
class RegionMask:
    """A set of lattice cells, optionally remembering the ball it came from.

    ``geometry`` is ``(ball, inside)``: the mask is the ball when ``inside``
    is true and its complement otherwise. Plain cell sets carry ``None``.
    """

    grid: TorusGrid
    member: np.ndarray
    geometry: tuple[BallSpec, bool] | None = field(default=None)

    def __post_init__(self):
        member = np.array(self.member, dtype=bool).ravel()
        if member.size != self.grid.size:
            raise GeometryError(f"mask has {member.size} cells, grid has {self.grid.size}")
        member.flags.writeable = False
        object.__setattr__(self, "member", member)

    @classmethod
    def from_cells(cls, grid: TorusGrid, cells) -> "RegionMask":
        member = np.zeros(grid.size, dtype=bool)
        member[np.asarray(cells, dtype=int)] = True
        return cls(grid, member)

    @property
    def count(self) -> int:
        return int(self.member.sum())

    @cached_property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.member)

    @cached_property
    def inner_boundary(self) -> np.ndarray:
        """Member cells with at least one neighbour outside the region."""
        outside = ~self.member[self.grid.neighbors]
        return self.member & outside.any(axis=1)

    @cached_property
    def outer_boundary(self) -> np.ndarray:
        """Non-member cells with at least one neighbour inside the region."""
        inside = self.member[self.grid.neighbors]
        return ~self.member & inside.any(axis=1)

    @cached_property
    def interior(self) -> np.ndarray:
        return self.member & ~self.inner_boundary

    def complement(self) -> "RegionMask":
        return complement_mask(self)

    def crossing_fraction(self, cells, faces) -> np.ndarray:
        """Fraction of the centre-to-centre segment travelled before crossing the region boundary.

        For each ``cells[j]`` and face ``faces[j]`` the segment runs from the
        cell centre to the neighbouring centre. Masks without geometry report
        1 (boundary at the neighbouring centre).
        """
        cells = np.asarray(cells, dtype=int)
        faces = np.asarray(faces, dtype=int)
        if self.geometry is None:
            return np.ones(cells.shape)
        ball, _ = self.geometry
        grid = self.grid
        p = minimum_image(grid.centers[cells] - np.asarray(ball.center), grid.length)
        step = np.zeros_like(p)
        step[np.arange(len(cells)), faces // 2] = np.where(faces % 2 == 0, grid.h, -grid.h)
        # |p + t*step|^2 = R^2  ->  h^2 t^2 + 2 (p.step) t + |p|^2 - R^2 = 0
        a = grid.h**2
        b = np.sum(p * step, axis=1)
        c = np.sum(p * p, axis=1) - ball.radius**2
        root = np.sqrt(np.maximum(b * b - a * c, 0.0))
        start_inside = c < 0
        t = np.where(start_inside, (-b + root) / a, (-b - root) / a)
        return np.clip(t, 0.0, 1.0)


def make_ball_mask(grid: TorusGrid, ball: BallSpec) -> RegionMask:
    """Cells whose centres lie strictly inside ``ball`` (minimum-image distance)."""
    if len(ball.center) != grid.d:
        raise GeometryError(f"ball centre has {len(ball.center)} coordinates, grid is {grid.d}-d")
    if ball.radius >= grid.length / 2:
        raise GeometryError(
            f"wrapping ball: radius {ball.radius} >= half the side length {grid.length / 2}"
        )
    if ball.radius < 2 * grid.h:
        raise GeometryError(
            f"under-resolved region: radius {ball.radius} < 2h = {2 * grid.h}"
        )
    dist = torus_distance(grid.centers, np.asarray(ball.center), grid)
    return RegionMask(grid, dist < ball.radius, (ball, True))


def complement_mask(mask: RegionMask) -> RegionMask:
    geometry = None
    if mask.geometry is not None:
        ball, inside = mask.geometry
        geometry = (ball, not inside)
    return RegionMask(mask.grid, ~mask.member, geometry)


def default_centers(grid: TorusGrid) -> list[tuple[float, ...]]:
    """Centre of the torus plus four centres offset by an eighth of the side."""
    mid = np.full(grid.d, grid.length / 2)
    out = [tuple(mid)]
    for axis in (0, 1):
        for sign in (1, -1):
            c = mid.copy()
            c[axis] += sign * grid.length / 8
            out.append(tuple(c))
    return out
