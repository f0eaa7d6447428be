"""Integral moments along geodesics, inner derivative / divergence, and the
along-ray primitive used to build potentials from data.

Conventions
-----------
* ``d`` is the symmetrized covariant derivative, ``δ`` the contracted one;
  both act on :class:`~tmt.fields.SymTensorField` (centered grid
  differences) and on :class:`~tmt.fields.FunctionField` (4th-order
  differences of the uncut callable).
* ``ray_primitive(..., backward=False)`` integrates forward from ``x`` to the
  exit.  The *backward* primitive ``u_b(x, ξ) = (-1)^m u(x, -ξ)`` integrates
  over the part of the geodesic that precedes ``x``; it vanishes at entry
  points and satisfies ``G u_b = <f, ξ^m>`` for the geodesic-flow generator
  ``G``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .fields import FunctionField, SymTensorField, as_points
from .geometry import DomainSpec, Fan, MetricSpec, _rk4_step, trace_batch
from .symtensor import contract_full, packing, symmetrize_dense, to_dense

__all__ = [
    "MomentSinogram",
    "RayPrimitive",
    "moment_transform",
    "moment_values",
    "covariant_derivative",
    "inner_derivative",
    "divergence",
    "l2_inner",
    "ray_primitive",
    "v_from_ray_primitive",
    "potential_from_ray_primitive",
    "generator_identity_check",
    "xi_derivative_check",
]

_CHUNK_SAMPLES = 200_000


# --------------------------------------------------------------------------
# moments


@dataclass(frozen=True, eq=False)
class MomentSinogram:
    """``I^q f`` over a fan; one value per geodesic, in fan order."""

    q: int
    order: int
    boundary_angles: np.ndarray = field(repr=False)
    dir_angles: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("sinogram values must be finite")
        n = vals.shape[0]
        if np.asarray(self.boundary_angles).shape != (n,) or np.asarray(self.dir_angles).shape != (n,):
            raise ValueError("angle arrays must match the number of values")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "boundary_angles", np.asarray(self.boundary_angles, dtype=float))
        object.__setattr__(self, "dir_angles", np.asarray(self.dir_angles, dtype=float))

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self))

    def with_values(self, values) -> "MomentSinogram":
        return MomentSinogram(self.q, self.order, self.boundary_angles, self.dir_angles, values)


def _check_q(q: int) -> int:
    if int(q) != q or q < 0:
        raise ValueError(f"moment order must be a non-negative integer, got {q}")
    return int(q)


def moment_values(f, fan: Fan, qs) -> np.ndarray:
    """``(len(qs), G)`` array of ``I^q f`` for every requested ``q``."""
    qs = [_check_q(q) for q in np.atleast_1d(qs)]
    n_geo, n_s = fan.t.shape
    out = np.empty((len(qs), n_geo))
    # bound the working set of field evaluations
    chunk = max(1, _CHUNK_SAMPLES // max(n_s, 1))
    for lo in range(0, n_geo, chunk):
        sl = slice(lo, lo + chunk)
        # skip the padding past each exit
        live = fan.valid[sl]
        vals = f.evaluate(fan.positions[sl][live])
        integrand = np.zeros(live.shape)
        integrand[live] = contract_full(vals, fan.velocities[sl][live], 2, f.order) * fan.weights[sl][live]
        for i, q in enumerate(qs):
            out[i, sl] = np.sum(integrand * fan.t[sl] ** q, axis=1)
    return out


def moment_transform(f, fan: Fan, q: int) -> MomentSinogram:
    """Composite-Simpson ``I^q f`` on every geodesic of ``fan``."""
    q = _check_q(q)
    vals = moment_values(f, fan, [q])[0]
    return MomentSinogram(q, f.order, fan.boundary_angles, fan.dir_angles, vals)


# --------------------------------------------------------------------------
# covariant calculus


def covariant_derivative(comps, partials, gam, order: int) -> np.ndarray:
    """Dense ``∇_a v_{i1..ir}`` with shape ``(..., a, i1, ..., ir)``.

    ``comps`` (..., K) packed values, ``partials`` (..., 2, K) coordinate
    derivatives (``[..., a, :] = ∂_a``), ``gam`` (..., 2, 2, 2) Christoffels
    indexed ``[p, a, i]``.
    """
    dim = 2
    out = to_dense(partials, dim, order)
    if order == 0:
        return out
    dense = to_dense(comps, dim, order)
    batch = dense.shape[: dense.ndim - order]
    nb = len(batch)
    gmat = gam.reshape(gam.shape[:-3] + (2, 4))
    for slot in range(order):
        # move the contracted slot last: (..., rest, p) @ (..., p, a*i)
        moved = np.moveaxis(dense, nb + slot, -1).reshape(batch + (-1, 2))
        prod = moved @ gmat
        pb = prod.shape[:-2]
        prod = prod.reshape(pb + (2,) * (order - 1) + (2, 2))
        # prod axes: (rest..., a, i) -> (a, i1, .., ir) with i at ``slot``
        prod = np.moveaxis(prod, -2, len(pb))
        prod = np.moveaxis(prod, -1, len(pb) + 1 + slot)
        out = out - prod
    return out


def _grid_partials(values: np.ndarray, spacing: float) -> np.ndarray:
    d1, d2 = np.gradient(values, spacing, axis=(0, 1))
    return np.stack([d1, d2], axis=-2)


def _field_partials(v: FunctionField, pts: np.ndarray, step: float) -> np.ndarray:
    if v.partials is not None:
        return np.broadcast_to(np.asarray(v.partials(pts), dtype=float), pts.shape[:-1] + (2, v.n_comps))
    return _fd_partials(v.raw, pts, step)


def _fd_partials(func, pts: np.ndarray, step: float) -> np.ndarray:
    """4th-order central differences of ``func`` in both coordinates."""
    offsets = np.array([-2.0, -1.0, 1.0, 2.0]) * step
    coef = np.array([1.0, -8.0, 8.0, -1.0]) / (12.0 * step)
    shifts = np.zeros((2, 4, 2))
    shifts[0, :, 0] = offsets
    shifts[1, :, 1] = offsets
    stencil = pts[..., None, None, :] + shifts
    vals = func(stencil)
    return np.einsum("s,...asK->...aK", coef, vals)


def _pointwise_d(comps, partials, gam, order):
    nab = covariant_derivative(comps, partials, gam, order)
    return symmetrize_dense(nab, 2, order + 1)


def _pointwise_delta(comps, partials, gam, ginv, order):
    nab = covariant_derivative(comps, partials, gam, order)
    batch = nab.shape[: nab.ndim - order - 1]
    nab = nab.reshape(batch + (2, 2 ** (order - 1), 2))
    red = np.einsum("...ja,...aIj->...I", ginv, nab)
    red = red.reshape(red.shape[:-1] + (2,) * (order - 1))
    return symmetrize_dense(red, 2, order - 1)


def inner_derivative(v, g: MetricSpec, step: float = 1e-3):
    """``dv``: symmetrized covariant derivative (order + 1)."""
    if isinstance(v, SymTensorField):
        pts = v.grid.points()
        part = _grid_partials(v.values, v.grid.spacing)
        vals = _pointwise_d(v.values, part, g.christoffel(pts), v.order)
        return SymTensorField(v.order + 1, v.grid, vals, v.mask, v.dim)
    if isinstance(v, FunctionField):
        order = v.order

        def func(points):
            pts = as_points(points)
            return _pointwise_d(v.raw(pts), _field_partials(v, pts, step), g.christoffel(pts), order)

        return FunctionField(order + 1, func, v.radius, v.dim, f"d{v.name}")
    raise TypeError(f"unsupported field type {type(v).__name__}")


def divergence(f, g: MetricSpec, step: float = 1e-3):
    """``δf = g^{ja} ∇_a f_{..j}`` (order - 1)."""
    if f.order < 1:
        raise ValueError("divergence needs a field of order >= 1")
    if isinstance(f, SymTensorField):
        pts = f.grid.points()
        part = _grid_partials(f.values, f.grid.spacing)
        vals = _pointwise_delta(f.values, part, g.christoffel(pts), g.inverse(pts), f.order)
        return SymTensorField(f.order - 1, f.grid, vals, f.mask, f.dim)
    if isinstance(f, FunctionField):
        order = f.order

        def func(points):
            pts = as_points(points)
            return _pointwise_delta(
                f.raw(pts), _field_partials(f, pts, step), g.christoffel(pts), g.inverse(pts), order
            )

        return FunctionField(order - 1, func, f.radius, f.dim, f"div{f.name}")
    raise TypeError(f"unsupported field type {type(f).__name__}")


def l2_inner(a: SymTensorField, b: SymTensorField, g: MetricSpec) -> float:
    """``∫ <a, b>_g dV_g`` by the nodal rule on the grid."""
    from .symtensor import metric_gram

    if a.order != b.order or a.grid != b.grid:
        raise ValueError("fields must share order and grid")
    pts = a.grid.points()
    gram = metric_gram(g.inverse(pts), a.order)
    dens = np.einsum("...i,...ij,...j->...", a.values, gram, b.values) * g.sqrt_det(pts)
    return float(np.sum(dens) * a.grid.spacing**2)


# --------------------------------------------------------------------------
# along-ray primitive


@dataclass(frozen=True, eq=False)
class RayPrimitive:
    points: np.ndarray
    directions: np.ndarray
    values: np.ndarray
    backward: bool = False

    def __float__(self) -> float:
        return float(np.asarray(self.values).reshape(-1)[0])


def _primitive_values(f, g, dom, x, xi, step, backward, threads=1):
    x = np.atleast_2d(as_points(x))
    xi = np.atleast_2d(as_points(xi))
    x, xi = np.broadcast_arrays(x, xi)
    sign = 1.0
    if backward:
        xi = -xi
        sign = (-1.0) ** f.order
    x = x.reshape(-1, 2)
    xi = xi.reshape(-1, 2)
    # geodesics per batch, sized so padded sample arrays stay small
    per = max(1, int(_CHUNK_SAMPLES * 5 * step / dom.diameter))
    out = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], per):
        sl = slice(lo, lo + per)
        fan = trace_batch(g, dom, x[sl], xi[sl], step, threads=threads)
        out[sl] = moment_values(f, fan, [0])[0]
    return sign * out


def ray_primitive(f, g: MetricSpec, dom: DomainSpec, x, xi, step: float = 1e-3, backward: bool = False):
    """``u(x, ξ) = ∫_0^l <f(γ), γ̇^m> dt`` along the geodesic from ``(x, ξ)``.

    ``ξ`` need not be unit; the geodesic is traced with that initial velocity.
    Accepts single points or batches (leading axis).
    """
    x_arr = as_points(x)
    xi_arr = as_points(xi)
    vals = _primitive_values(f, g, dom, x_arr, xi_arr, step, backward)
    if x_arr.ndim == 1 and xi_arr.ndim == 1:
        vals = vals[0]
    return RayPrimitive(x_arr, xi_arr, vals, backward)


def _xi_stencil(order: int, h: float):
    """Mixed central-difference stencils for every packed index of ``order``.

    Returns ``(offsets (P, 2), rows (P,), coef (P,))``: the derivative for
    packed index ``I`` is ``sum coef[rows == I] * u(e + offsets[rows == I])``.
    """
    pk = packing(2, order)
    offs, rows, coefs = [], [], []
    for r, (a1, a2) in enumerate(pk.exponents):
        for k1 in range(a1 + 1):
            for k2 in range(a2 + 1):
                c = (-1) ** (k1 + k2) * _binom(a1, k1) * _binom(a2, k2) / h**order
                offs.append(((a1 / 2 - k1) * h, (a2 / 2 - k2) * h))
                rows.append(r)
                coefs.append(c)
    return np.array(offs), np.array(rows), np.array(coefs)


def _binom(n, k):
    return factorial(n) // (factorial(k) * factorial(n - k))


def v_from_ray_primitive(
    f, g: MetricSpec, dom: DomainSpec, x, e_n, xi_step: float = 1e-3, step: float = 1e-3, threads: int = 1
) -> np.ndarray:
    """Packed ``v(x) = ∂_ξ^{m-1} u_b(x, ξ) / (m-1)!`` at ``ξ = e_n``.

    Uses the backward primitive, so ``v`` vanishes where the geodesic
    through ``(x, e_n)`` has not yet met the support of ``f``;
    ``v_{n..n}(x) = u_b(x, e_n)``.  Returns shape ``x.shape[:-1] + (K,)``.
    """
    if f.order < 1:
        raise ValueError("need a field of order >= 1")
    r = f.order - 1
    pts = as_points(x)
    batch = pts.shape[:-1]
    pts = pts.reshape(-1, 2)
    en = np.broadcast_to(as_points(e_n), batch + (2,)).reshape(-1, 2)
    offs, rows, coef = _xi_stencil(r, xi_step)
    dirs = en[:, None, :] + offs[None]
    starts = np.broadcast_to(pts[:, None, :], dirs.shape)
    u = _primitive_values(f, g, dom, starts.reshape(-1, 2), dirs.reshape(-1, 2), step, True, threads)
    u = u.reshape(pts.shape[0], -1) * coef
    out = np.zeros((pts.shape[0], packing(2, r).size))
    np.add.at(out.T, rows, u.T)
    return (out / factorial(r)).reshape(batch + (-1,))


def potential_from_ray_primitive(
    f, g: MetricSpec, dom: DomainSpec, e_n, xi_step: float = 1e-3, step: float = 1e-3
) -> FunctionField:
    """The field ``x -> v_from_ray_primitive(f, ..., x, e_n(x))``.

    ``e_n`` is a constant vector or a callable of points.
    """
    en = e_n if callable(e_n) else (lambda p, c=np.asarray(e_n, float): np.broadcast_to(c, p.shape))

    def func(points):
        pts = as_points(points)
        return v_from_ray_primitive(f, g, dom, pts, en(pts), xi_step, step)

    return FunctionField(f.order - 1, func, None, f.dim, "v_ray")


# --------------------------------------------------------------------------
# identity checks


@dataclass
class IdentityCheck:
    max_residual: float
    residuals: np.ndarray = field(repr=False)


def generator_identity_check(
    h,
    g: MetricSpec,
    dom: DomainSpec,
    points,
    directions,
    w=None,
    flow_step: float = 1e-4,
    step: float = 1e-3,
) -> IdentityCheck:
    """Max ``|Gw - <h(x), ξ^m>|`` with ``Gw`` by central differences along the flow.

    ``w(x, ξ)`` defaults to the backward primitive of ``h`` on ``dom``.
    """
    x = np.atleast_2d(as_points(points))
    xi = np.atleast_2d(as_points(directions))
    if w is None:
        def w(p, d):
            return _primitive_values(h, g, dom, p, d, step, backward=True)

    xp, vp = _rk4_step(g, x, xi, flow_step)
    xm, vm = _rk4_step(g, x, xi, -flow_step)
    both = w(np.concatenate([xp, xm]), np.concatenate([vp, vm]))
    gw = (both[: len(x)] - both[len(x) :]) / (2 * flow_step)
    res = np.abs(gw - contract_full(h.evaluate(x), xi, 2, h.order))
    return IdentityCheck(float(res.max()), res)


def xi_derivative_check(
    f,
    g: MetricSpec,
    dom: DomainSpec,
    points,
    e_n,
    xi_step: float = 1e-3,
    step: float = 2e-3,
    inner_step: float = 2e-3,
    x_step: float = 1e-3,
) -> IdentityCheck:
    """ξ-derivatives (orders ``0..m-1``) at ``ξ = e_n`` of ``w``, the backward
    primitive of ``h = f - dv`` with ``v`` from :func:`potential_from_ray_primitive`.

    All of them vanish in exact arithmetic.  ``residuals`` has one row per
    point, one column per (derivative order, packed index).
    """
    m = f.order
    v = potential_from_ray_primitive(f, g, dom, e_n, xi_step, inner_step)
    dv = inner_derivative(v, g, x_step)
    h = FunctionField(m, lambda p: f.evaluate(p) - dv.raw(p), None, 2, "h")
    pts = np.atleast_2d(as_points(points))
    en = np.broadcast_to(as_points(e_n) if not callable(e_n) else e_n(pts), pts.shape)
    cols = []
    for order in range(m):
        offs, rows, coef = _xi_stencil(order, xi_step)
        dirs = en[:, None, :] + offs[None]
        starts = np.broadcast_to(pts[:, None, :], dirs.shape)
        u = _primitive_values(h, g, dom, starts.reshape(-1, 2), dirs.reshape(-1, 2), step, True)
        u = u.reshape(pts.shape[0], -1) * coef
        out = np.zeros((pts.shape[0], packing(2, order).size))
        np.add.at(out.T, rows, u.T)
        cols.append(out)
    res = np.abs(np.concatenate(cols, axis=1))
    return IdentityCheck(float(res.max()), res)
