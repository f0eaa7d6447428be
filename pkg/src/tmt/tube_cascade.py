"""Semi-geodesic tube coordinates and the triangular ODE cascade.

The chart around a reference geodesic ``γ₀`` is built by shooting: a
transversal geodesic ``σ`` leaves the start point ``x₀`` of ``γ₀``
g-orthogonally, and from every ``σ(x')`` a unit-speed geodesic leaves
g-orthogonally to ``σ``.  The chart map is ``Φ(x', x^n) =`` that geodesic
at arc length ``x^n``.  By the Gauss lemma ``ĝ_nn = 1`` and ``ĝ_1n = 0``.

Chart coordinates use axis 0 for ``x'`` and axis 1 for ``x^n``.  In two
dimensions an ``r``-tensor is described in the chart by the components
``v_{n..n 1..1}``; the packed rank of a component equals its number of
``n`` indices.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .fields import as_points
from .geometry import DomainSpec, MetricSpec, _endpoint, _rk4_step, trace_batch
from .symtensor import pack_index, symmetrize_dense, to_dense
from .transforms import _pointwise_d

logger = logging.getLogger(__name__)

__all__ = [
    "ChartFoldError",
    "SemiGeodesicChart",
    "CascadeResult",
    "build_chart",
    "cascade_solve",
    "chart_inner_derivative",
    "dv_normal_expansion",
    "diff4",
    "expansion_terms",
]

N_AXIS = 1  # chart axis of x^n


class ChartFoldError(RuntimeError):
    """Members of the geodesic family cross: the chart map is not a diffeomorphism."""


def diff4(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    """4th-order central differences; 2nd-order one-sided in the two edge layers."""
    a = np.moveaxis(np.asarray(a, dtype=float), axis, 0)
    n = a.shape[0]
    if n < 5:
        raise ValueError("need at least 5 samples along the differentiated axis")
    out = np.empty_like(a)
    out[2:-2] = (a[:-4] - 8 * a[1:-3] + 8 * a[3:-1] - a[4:]) / (12 * h)
    out[0] = (-3 * a[0] + 4 * a[1] - a[2]) / (2 * h)
    out[1] = (a[2] - a[0]) / (2 * h)
    out[-2] = (a[-1] - a[-3]) / (2 * h)
    out[-1] = (3 * a[-1] - 4 * a[-2] + a[-3]) / (2 * h)
    return np.moveaxis(out, 0, axis)


def _chart_partials(values: np.ndarray, dxp: float, dxn: float) -> np.ndarray:
    return np.stack([diff4(values, dxp, 0), diff4(values, dxn, 1)], axis=-2)


def _transform(comps: np.ndarray, jac: np.ndarray, order: int) -> np.ndarray:
    """Pull back packed covariant components: ``f̂_{i..} = f_{a..} J^a_i ...``."""
    if order == 0:
        return np.array(comps, dtype=float)
    dense = to_dense(comps, 2, order)
    jb = jac.reshape(jac.shape[:-2] + (1,) * (order - 1) + (2, 2))
    for slot in range(order):
        dense = np.moveaxis(dense, -order + slot, -1)
        dense = (dense[..., None, :] @ jb)[..., 0, :]  # f_a J^a_i
        dense = np.moveaxis(dense, -1, -order + slot)
    return symmetrize_dense(dense, 2, order)


@dataclass(frozen=True, eq=False)
class SemiGeodesicChart:
    """Tube chart sampled on an ``(N', N_n + 1)`` grid.

    ``world[i, j]`` is ``Φ(xp[i], xn[j])``; ``jac[..., a, i] = ∂_i Φ^a``;
    ``ghat`` is the pulled-back metric and ``gamma_hat[..., k, i, j]`` its
    Christoffel symbols.
    """

    origin: np.ndarray
    direction: np.ndarray
    transversal: np.ndarray
    eps: float
    length: float
    xp: np.ndarray = field(repr=False)
    xn: np.ndarray = field(repr=False)
    world: np.ndarray = field(repr=False)
    jac: np.ndarray = field(repr=False)
    ghat: np.ndarray = field(repr=False)
    gamma_hat: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.world.shape[:2]

    @property
    def dxp(self) -> float:
        return float(self.xp[1] - self.xp[0])

    @property
    def dxn(self) -> float:
        return float(self.xn[1] - self.xn[0])

    @property
    def e_n(self) -> np.ndarray:
        """World components of ``∂/∂x^n`` at every node."""
        return self.jac[..., :, N_AXIS]

    def interior(self, margin: int = 2) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[margin:-margin, margin:-margin] = True
        return mask

    def metric_defect(self) -> float:
        """``max |ĝ_ni - δ_ni|`` over interior nodes."""
        inner = self.interior()
        d = np.abs(self.ghat[..., N_AXIS, :] - np.eye(2)[N_AXIS])
        return float(d[inner].max())

    def christoffel_defect(self) -> float:
        """``max(|Γ̂^i_nn|, |Γ̂^n_in|)`` over interior nodes."""
        inner = self.interior()
        a = np.abs(self.gamma_hat[..., :, N_AXIS, N_AXIS])
        b = np.abs(self.gamma_hat[..., N_AXIS, :, N_AXIS])
        return float(max(a[inner].max(), b[inner].max()))

    def pullback(self, f) -> np.ndarray:
        """Chart components of a world field ``f`` at every chart node."""
        return _transform(f.evaluate(self.world), self.jac, f.order)

    def pullback_values(self, comps: np.ndarray, order: int) -> np.ndarray:
        return _transform(comps, self.jac, order)

    def dump_rows(self):
        """Rows ``(xp, xn, world_x1, world_x2, g11, g12, g22)``."""
        xp, xn = np.meshgrid(self.xp, self.xn, indexing="ij")
        cols = [
            xp,
            xn,
            self.world[..., 0],
            self.world[..., 1],
            self.ghat[..., 0, 0],
            self.ghat[..., 0, 1],
            self.ghat[..., 1, 1],
        ]
        return np.stack([c.ravel() for c in cols], axis=-1)


def _perp_unit(g: MetricSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """g-unit vector g-orthogonal to ``u`` (``w ∝ rot90(g u)``)."""
    gu = np.einsum("...ij,...j->...i", g.eval(x), u)
    w = np.stack([-gu[..., 1], gu[..., 0]], axis=-1)
    return w / g.norm(x, w)[..., None]


def _chart_once(g, origin, direction, eps, length, n_xp, n_xn, step, fd):
    tau = _perp_unit(g, origin, direction)
    xp = np.linspace(-eps, eps, n_xp)
    svals = np.concatenate([xp, xp + fd, xp - fd])
    sign = np.where(svals >= 0, 1.0, -1.0)
    starts = np.broadcast_to(origin, (svals.size, 2))
    pos, vel = _endpoint(g, starts, sign[:, None] * tau, np.abs(svals), step)
    tangent = sign[:, None] * vel  # σ'(s)
    normal = _perp_unit(g, pos, tangent)
    # orient the family along the reference direction
    ref = _perp_unit(g, origin[None], tau[None])[0]
    flip = 1.0 if float(g.inner(origin, ref, direction)) > 0 else -1.0
    normal = flip * normal

    xn = np.linspace(0.0, length, n_xn + 1)
    dt = length / n_xn
    substeps = max(1, int(np.ceil(dt / step)))
    h = dt / substeps
    x, v = pos, normal
    track_x = np.empty((n_xn + 1,) + x.shape)
    track_v = np.empty_like(track_x)
    track_x[0], track_v[0] = x, v
    for j in range(1, n_xn + 1):
        for _ in range(substeps):
            x, v = _rk4_step(g, x, v, h)
        track_x[j], track_v[j] = x, v
    track_x = np.moveaxis(track_x, 0, 1)  # (3 N', N_n + 1, 2)
    track_v = np.moveaxis(track_v, 0, 1)
    base, plus, minus = np.split(track_x, 3)
    vbase, vplus, vminus = np.split(track_v, 3)

    jac = np.empty(base.shape[:2] + (2, 2))
    jac[..., :, 0] = (plus - minus) / (2 * fd)
    jac[..., :, 1] = vbase
    # second derivatives ∂_i ∂_j Φ^c
    hess = np.empty(base.shape[:2] + (2, 2, 2))
    hess[..., :, 0, 0] = (plus - 2 * base + minus) / fd**2
    hess[..., :, 0, 1] = hess[..., :, 1, 0] = (vplus - vminus) / (2 * fd)
    gam_w = g.christoffel(base)
    hess[..., :, 1, 1] = -np.einsum("...cab,...a,...b->...c", gam_w, vbase, vbase)

    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    det = det * np.sign(det[n_xp // 2, 0])
    scale = np.abs(det[:, 0]).min()
    if not np.all(np.isfinite(det)) or np.any(det <= 1e-3 * scale):
        worst = float(np.nanmin(det) / scale)
        raise ChartFoldError(f"chart map folds (min det ratio {worst:.3e}) at eps={eps:g}")

    gw = g.eval(base)
    ghat = np.einsum("...ai,...ab,...bj->...ij", jac, gw, jac)
    jinv = np.linalg.inv(jac)
    inner = hess + np.einsum("...cab,...ai,...bj->...cij", gam_w, jac, jac)
    gamma_hat = np.einsum("...kc,...cij->...kij", jinv, inner)
    return SemiGeodesicChart(
        np.asarray(origin, float), np.asarray(direction, float), tau, eps, length,
        xp, xn, base, jac, ghat, gamma_hat,
    )


def build_chart(
    g: MetricSpec,
    dom: DomainSpec,
    gamma0,
    eps: float = 0.1,
    resolutions: tuple[int, int] = (41, 400),
    step: float = 1e-3,
    retries: int = 4,
    length: float | None = None,
    fd: float = 1e-4,
    tol_metric: float = 1e-4,
    tol_christoffel: float = 1e-3,
) -> SemiGeodesicChart:
    """Tube chart around ``gamma0``.

    ``gamma0`` is a :class:`~tmt.geometry.Geodesic` or a ``(start, direction)``
    pair; the start should lie on (or outside) the boundary of ``dom``,
    typically the extended disk.  On a fold, ``eps`` is halved up to
    ``retries`` times before :class:`ChartFoldError` propagates.
    """
    if hasattr(gamma0, "start"):
        origin, direction = gamma0.start, gamma0.direction
    else:
        origin, direction = gamma0
    origin = as_points(origin).astype(float)
    direction = as_points(direction).astype(float)
    direction = direction / float(g.norm(origin, direction))
    if length is None:
        fan = trace_batch(g, dom, origin[None], direction[None], step)
        length = float(fan.exit_params[0])
    n_xp, n_xn = resolutions
    if n_xn % 2:
        raise ValueError("longitudinal resolution must be even")
    err: ChartFoldError | None = None
    for attempt in range(retries + 1):
        try:
            chart = _chart_once(g, origin, direction, eps, length, n_xp, n_xn, step, fd)
        except (ChartFoldError, np.linalg.LinAlgError) as exc:
            # a family member that runs off the metric's domain also breaks the chart
            err = exc if isinstance(exc, ChartFoldError) else ChartFoldError(f"family left the metric domain: {exc}")
            logger.info("chart fold at eps=%g, retrying with eps=%g", eps, eps / 2)
            eps = eps / 2
            continue
        md, cd = chart.metric_defect(), chart.christoffel_defect()
        if md > tol_metric or cd > tol_christoffel:
            raise ChartFoldError(
                f"chart invariants violated: metric defect {md:.2e}, Christoffel defect {cd:.2e}"
            )
        return chart
    assert err is not None
    raise err


# --------------------------------------------------------------------------
# cascade


@dataclass(frozen=True, eq=False)
class CascadeResult:
    v: np.ndarray = field(repr=False)  # (N', N_n + 1, m) chart components of v
    h: np.ndarray = field(repr=False)  # (N', N_n + 1, m + 1) chart components of f - dv
    normal_residual: float = 0.0
    f_max: float = 0.0

    @property
    def relative_residual(self) -> float:
        return self.normal_residual / self.f_max if self.f_max > 0 else self.normal_residual


def chart_inner_derivative(v: np.ndarray, chart: SemiGeodesicChart, order: int) -> np.ndarray:
    """Generic ``dv`` in chart coordinates (4th-order chart differences)."""
    part = _chart_partials(v, chart.dxp, chart.dxn)
    return _pointwise_d(v, part, chart.gamma_hat, order)


def _midpoints(a: np.ndarray) -> np.ndarray:
    """Cubic-interpolated values halfway between consecutive samples along axis 1."""
    n = a.shape[1]
    out = np.empty((a.shape[0], n - 1) + a.shape[2:])
    out[:, 1:-1] = (-a[:, :-3] + 9 * a[:, 1:-2] + 9 * a[:, 2:-1] - a[:, 3:]) / 16
    out[:, 0] = (5 * a[:, 0] + 15 * a[:, 1] - 5 * a[:, 2] + a[:, 3]) / 16
    out[:, -1] = (5 * a[:, -1] + 15 * a[:, -2] - 5 * a[:, -3] + a[:, -4]) / 16
    return out


def _solve_linear(coef: np.ndarray, src: np.ndarray, dx: float, init: np.ndarray) -> np.ndarray:
    """RK4 for ``y' = coef y + src`` along axis 1 with ``y[:, 0] = init``."""
    cm, sm = _midpoints(coef), _midpoints(src)
    y = np.empty_like(src)
    y[:, 0] = init
    for j in range(src.shape[1] - 1):
        yj = y[:, j]
        k1 = coef[:, j] * yj + src[:, j]
        k2 = cm[:, j] * (yj + 0.5 * dx * k1) + sm[:, j]
        k3 = cm[:, j] * (yj + 0.5 * dx * k2) + sm[:, j]
        k4 = coef[:, j + 1] * (yj + dx * k3) + src[:, j + 1]
        y[:, j + 1] = yj + dx / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def cascade_solve(f, chart: SemiGeodesicChart, order: int | None = None, init: float | np.ndarray = 0.0) -> CascadeResult:
    """Solve for ``v`` with ``(f - dv)_{..n} = 0`` and ``v = init`` at ``x^n = 0``.

    ``f`` is a world field (pulled back here) or an array of chart
    components ``(N', N_n + 1, m + 1)`` together with ``order``.
    """
    if hasattr(f, "evaluate"):
        order = f.order
        fhat = chart.pullback(f)
    else:
        if order is None:
            raise ValueError("order is required for component arrays")
        fhat = np.asarray(f, dtype=float)
    m = order
    if m < 1:
        raise ValueError("the cascade needs a tensor field of order >= 1")
    if fhat.shape != chart.shape + (m + 1,):
        raise ValueError(f"chart components have shape {fhat.shape}, expected {chart.shape + (m + 1,)}")
    gh = chart.gamma_hat
    g1_1n = gh[..., 0, 0, 1]
    gn_1n = gh[..., 1, 0, 1]
    g1_11 = gh[..., 0, 0, 0]
    gn_11 = gh[..., 1, 0, 0]
    init = np.broadcast_to(np.asarray(init, dtype=float), (m, chart.shape[0]))
    comps: list[np.ndarray] = []  # comps[k] = v_{n^{m-1-k} 1^k}
    for k in range(m):
        f_k = fhat[..., m - k]
        rhs = m * f_k
        src = np.zeros(chart.shape)
        if k >= 1:
            prev = comps[k - 1]
            rhs = rhs - k * diff4(prev, chart.dxp, 0) + k * (k - 1) * g1_11 * prev
            src = src + 2 * k * gn_1n * prev
        if k >= 2:
            rhs = rhs + k * (k - 1) * gn_11 * comps[k - 2]
        src = src + rhs / (m - k)
        coef = 2 * k * g1_1n
        comps.append(_solve_linear(coef, src, chart.dxn, init[k]))
    # packed rank of v_k is its number of n indices, m - 1 - k
    v = np.stack(comps[::-1], axis=-1)
    h = fhat - chart_inner_derivative(v, chart, m - 1)
    inner = chart.interior()
    normal = np.abs(h[..., 1:])[inner]
    f_max = float(np.abs(fhat).max())
    return CascadeResult(v, h, float(normal.max()) if normal.size else 0.0, f_max)


# --------------------------------------------------------------------------
# closed-form expansion of (dv)_{n..n i_k..i_1}


def _component(v: np.ndarray, multiset) -> np.ndarray:
    return v[..., pack_index([i + 1 for i in multiset], 2)]


def dv_normal_expansion(v: np.ndarray, chart: SemiGeodesicChart, k: int, order: int | None = None) -> np.ndarray:
    """``(dv)_{n..n I}`` for every sorted ``I`` of length ``k`` from the
    closed-form expansion in semi-geodesic coordinates.

    ``v`` holds chart components ``(..., K_{m-1})`` on the chart grid.
    Returns ``(..., k + 1)``, one column per multiset ``I`` (lexicographic).
    The pair sum runs over unordered pairs ``l < q``.
    """
    if order is None:
        order = v.shape[-1] - 1  # an r-tensor in 2-D has r + 1 components
    m = order + 1
    if not 0 <= k <= m:
        raise ValueError(f"k must lie in [0, {m}], got {k}")
    part = _chart_partials(v, chart.dxp, chart.dxn)
    return expansion_terms(v, part, chart.gamma_hat, m, k)


def expansion_terms(v, part, gam, m: int, k: int) -> np.ndarray:
    """Pointwise evaluation of the expansion for all ``I`` of length ``k``."""
    n = N_AXIS
    cols = []
    for idx in itertools.combinations_with_replacement(range(2), k):
        out = np.zeros(v.shape[:-1])
        if m - k > 0:
            base = [n] * (m - 1 - k)
            out = out + (m - k) / m * _component(part[..., n, :], base + list(idx))
            for l in range(k):
                rest = list(idx[:l]) + list(idx[l + 1 :])
                for p in range(2):
                    out = out - 2 * (m - k) / m * gam[..., p, idx[l], n] * _component(v, base + rest + [p])
        base = [n] * (m - k)
        for l in range(k):
            rest = list(idx[:l]) + list(idx[l + 1 :])
            out = out + _component(part[..., idx[l], :], base + rest) / m
        for l in range(k):
            for q in range(l + 1, k):
                rest = [idx[r] for r in range(k) if r not in (l, q)]
                for p in range(2):
                    out = out - 2 / m * gam[..., p, idx[l], idx[q]] * _component(v, base + rest + [p])
        cols.append(out)
    return np.stack(cols, axis=-1)
