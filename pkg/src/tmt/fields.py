"""Symmetric tensor fields on the disk.

Two concrete kinds share the ``evaluate(points)`` protocol:

* :class:`SymTensorField` -- samples on a regular N x N lattice, evaluated
  off-grid by bilinear interpolation; values outside the domain mask are 0.
* :class:`FunctionField` -- an analytic callable, evaluated exactly and
  multiplied by the indicator of the closed disk (extension by zero).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .symtensor import n_components

__all__ = ["Grid", "SymTensorField", "FunctionField", "as_points"]

_CLOSURE_TOL = 1e-9


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.shape[-1] != 2:
        raise ValueError(f"points must have trailing dimension 2, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class Grid:
    """Regular ``n x n`` lattice on ``[-half_width, half_width]^2`` ('ij' order)."""

    n: int
    half_width: float = 1.0

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("grid needs at least 3 nodes per axis")
        if self.half_width <= 0:
            raise ValueError("half_width must be positive")

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.n)

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.n - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    def points(self) -> np.ndarray:
        x1, x2 = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.stack([x1, x2], axis=-1)

    def disk_mask(self, radius: float) -> np.ndarray:
        """Nodes strictly inside the disk of the given radius."""
        return np.sum(self.points() ** 2, axis=-1) < radius**2

    def boundary_distance(self, radius: float) -> np.ndarray:
        """Signed distance ``radius - |x|`` measured in grid cells."""
        return (radius - np.linalg.norm(self.points(), axis=-1)) / self.spacing

    def bilinear(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Interpolation stencils for ``points``.

        Returns ``(i, j, w)`` each with shape ``points.shape[:-1] + (4,)``:
        node indices and weights of the four surrounding nodes.  Points
        outside the lattice get zero weights (and clamped indices).
        """
        pts = as_points(points)
        h = self.spacing
        u = (pts[..., 0] + self.half_width) / h
        v = (pts[..., 1] + self.half_width) / h
        inside = (u >= 0) & (u <= self.n - 1) & (v >= 0) & (v <= self.n - 1)
        i0 = np.clip(np.floor(u).astype(np.intp), 0, self.n - 2)
        j0 = np.clip(np.floor(v).astype(np.intp), 0, self.n - 2)
        a = np.clip(u - i0, 0.0, 1.0)
        b = np.clip(v - j0, 0.0, 1.0)
        w = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=-1)
        w = w * inside[..., None]
        ii = np.stack([i0, i0 + 1, i0, i0 + 1], axis=-1)
        jj = np.stack([j0, j0, j0 + 1, j0 + 1], axis=-1)
        return ii, jj, w


@dataclass(frozen=True, eq=False)
class SymTensorField:
    """Grid-sampled symmetric tensor field.

    ``values`` has shape ``(N, N, K)`` with ``K = C(dim+order-1, order)``.
    Values at masked-out nodes are forced to zero.
    """

    order: int
    grid: Grid
    values: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    dim: int = 2

    def __post_init__(self):
        k = n_components(self.dim, self.order)
        vals = np.array(self.values, dtype=float)
        if vals.shape == self.grid.shape:
            vals = vals[..., None]
        if vals.shape != self.grid.shape + (k,):
            raise ValueError(f"values shape {vals.shape} != {self.grid.shape + (k,)}")
        mask = np.array(self.mask, dtype=bool)
        if mask.shape != self.grid.shape:
            raise ValueError("mask shape does not match grid")
        vals[~mask] = 0.0
        vals.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "mask", mask)

    @property
    def n_comps(self) -> int:
        return self.values.shape[-1]

    @classmethod
    def zeros(cls, order: int, grid: Grid, radius: float = 1.0, dim: int = 2) -> "SymTensorField":
        k = n_components(dim, order)
        return cls(order, grid, np.zeros(grid.shape + (k,)), grid.disk_mask(radius), dim)

    def evaluate(self, points) -> np.ndarray:
        ii, jj, w = self.grid.bilinear(points)
        return np.einsum("...s,...sk->...k", w, self.values[ii, jj])

    def with_values(self, values) -> "SymTensorField":
        return SymTensorField(self.order, self.grid, values, self.mask, self.dim)

    def __add__(self, other: "SymTensorField") -> "SymTensorField":
        self._check_compatible(other)
        return SymTensorField(
            self.order, self.grid, self.values + other.values, self.mask | other.mask, self.dim
        )

    def __sub__(self, other: "SymTensorField") -> "SymTensorField":
        return self + (-1.0) * other

    def __mul__(self, alpha: float) -> "SymTensorField":
        return self.with_values(float(alpha) * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "SymTensorField":
        return (-1.0) * self

    def _check_compatible(self, other: "SymTensorField") -> None:
        if not isinstance(other, SymTensorField):
            raise TypeError("can only combine grid fields with grid fields")
        if (other.order, other.dim) != (self.order, self.dim) or other.grid != self.grid:
            raise ValueError("fields differ in order, dimension or grid")

    def norm(self, weights: np.ndarray | None = None) -> float:
        """Discrete L2 norm (Euclidean component norm, cell-area weighted)."""
        from .symtensor import packing

        mult = packing(self.dim, self.order).multiplicity
        dens = np.sum(self.values**2 * mult, axis=-1)
        if weights is not None:
            dens = dens * weights
        return float(np.sqrt(np.sum(dens) * self.grid.spacing**2))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


class FunctionField:
    """Analytic symmetric tensor field given by a vectorized callable.

    ``func(points)`` maps ``(..., 2)`` arrays to packed components
    ``(..., K)``; the optional ``partials(points)`` returns exact coordinate
    derivatives ``(..., 2, K)``.  When ``radius`` is set the field is multiplied by the
    indicator of the closed disk ``|x| <= radius``; ``raw`` evaluates without
    that cut-off (used for finite differences across the boundary).
    """

    def __init__(
        self,
        order: int,
        func: Callable[[np.ndarray], np.ndarray],
        radius: float | None = 1.0,
        dim: int = 2,
        name: str = "",
        partials: Callable[[np.ndarray], np.ndarray] | None = None,
    ):
        self.order = order
        # optional exact coordinate derivatives: points -> (..., 2, K)
        self.partials = partials
        self.dim = dim
        self.func = func
        self.radius = radius
        self.name = name
        self.n_comps = n_components(dim, order)

    def __repr__(self) -> str:
        return f"FunctionField(order={self.order}, radius={self.radius}, name={self.name!r})"

    def raw(self, points) -> np.ndarray:
        pts = as_points(points)
        out = np.asarray(self.func(pts), dtype=float)
        if out.shape == pts.shape[:-1] and self.n_comps == 1:
            out = out[..., None]
        return np.broadcast_to(out, pts.shape[:-1] + (self.n_comps,))

    def evaluate(self, points) -> np.ndarray:
        pts = as_points(points)
        out = self.raw(pts)
        if self.radius is None:
            return np.array(out)
        # closed disk: exit samples of traced geodesics sit on the circle
        # up to the bisection tolerance
        inside = np.sum(pts**2, axis=-1) <= self.radius**2 * (1.0 + _CLOSURE_TOL)
        return out * inside[..., None]

    def sample(self, grid: Grid, radius: float | None = None) -> SymTensorField:
        r = self.radius if radius is None else radius
        mask = grid.disk_mask(r) if r is not None else np.ones(grid.shape, dtype=bool)
        return SymTensorField(self.order, grid, self.raw(grid.points()), mask, self.dim)

    def _combine(self, other, op, name) -> "FunctionField":
        if not isinstance(other, FunctionField):
            raise TypeError("can only combine function fields with function fields")
        if (other.order, other.dim) != (self.order, self.dim):
            raise ValueError("fields differ in order or dimension")
        if self.radius == other.radius:
            f, g = self.raw, other.raw
            radius = self.radius
        else:
            # different cut-offs: combine the already cut-off fields
            f, g = self.evaluate, other.evaluate
            radius = None
        parts = None
        if radius == self.radius and self.partials is not None and other.partials is not None:
            pa, pb = self.partials, other.partials
            parts = lambda p: op(pa(p), pb(p))  # noqa: E731
        return FunctionField(self.order, lambda p: op(f(p), g(p)), radius, self.dim, name, parts)

    def __add__(self, other: "FunctionField") -> "FunctionField":
        return self._combine(other, np.add, f"({self.name}+{other.name})")

    def __sub__(self, other: "FunctionField") -> "FunctionField":
        return self._combine(other, np.subtract, f"({self.name}-{other.name})")

    def __mul__(self, alpha: float) -> "FunctionField":
        f = self.func
        a = float(alpha)
        parts = None
        if self.partials is not None:
            pf = self.partials
            parts = lambda p: a * np.asarray(pf(p))  # noqa: E731
        return FunctionField(self.order, lambda p: a * np.asarray(f(p)), self.radius, self.dim, self.name, parts)

    __rmul__ = __mul__
