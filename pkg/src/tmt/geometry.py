"""Metrics on the disk, geodesic tracing, fans and simplicity diagnostics.

All tracing is batched: a set of geodesics advances together through a
fixed-step RK4 integrator, each one frozen once it has met its stopping
event.  Event crossings (boundary exit, closest approach) are refined by
bisection on the length of a single RK4 step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import compile_expression

logger = logging.getLogger(__name__)

__all__ = [
    "MetricSpec",
    "DomainSpec",
    "ConvexSet",
    "Geodesic",
    "Fan",
    "TrappedGeodesicError",
    "ShootingError",
    "christoffel",
    "trace_geodesic",
    "trace_batch",
    "make_fan",
    "simplicity_check",
    "SimplicityReport",
    "geodesic_between",
    "shoot_batch",
    "simpson_weights",
]


class TrappedGeodesicError(RuntimeError):
    """A geodesic did not leave the domain within the length cap."""


class ShootingError(RuntimeError):
    """Two-point shooting did not converge."""


# --------------------------------------------------------------------------
# metric


class MetricSpec:
    """Riemannian metric ``g_ij(x)`` on the plane.

    Use the constructors :meth:`euclidean`, :meth:`conformal` (``g = e^{2λ} δ``)
    or :meth:`from_callable` (any vectorized ``x -> 2x2`` table).
    """

    def __init__(
        self,
        kind: str,
        evaluator: Callable[[np.ndarray], np.ndarray],
        deriv_step: float = 1e-5,
        lambda_expr: str | None = None,
    ):
        if kind not in ("euclidean", "conformal", "table"):
            raise ValueError(f"unknown metric kind {kind!r}")
        if deriv_step <= 0:
            raise ValueError("deriv_step must be positive")
        self.kind = kind
        self._eval = evaluator
        self.deriv_step = deriv_step
        self.lambda_expr = lambda_expr
        self.conformal_factor: Callable | None = None

    def __repr__(self) -> str:
        extra = f", lambda={self.lambda_expr!r}" if self.lambda_expr else ""
        return f"MetricSpec({self.kind}{extra})"

    @classmethod
    def euclidean(cls) -> "MetricSpec":
        def ev(x):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()

        return cls("euclidean", ev)

    @classmethod
    def conformal(cls, lam: str | Callable, deriv_step: float = 1e-5) -> "MetricSpec":
        """``g = exp(2 λ(x)) I``; ``lam`` is an expression string or a callable of (x1, x2)."""
        fn = compile_expression(lam) if isinstance(lam, str) else lam

        def ev(x):
            x = np.asarray(x, dtype=float)
            s = np.exp(2.0 * fn(x[..., 0], x[..., 1]))
            out = np.zeros(x.shape[:-1] + (2, 2))
            out[..., 0, 0] = s
            out[..., 1, 1] = s
            return out

        spec = cls("conformal", ev, deriv_step, lam if isinstance(lam, str) else None)
        spec.conformal_factor = fn
        return spec

    @classmethod
    def from_callable(cls, fn: Callable[[np.ndarray], np.ndarray], deriv_step: float = 1e-5) -> "MetricSpec":
        return cls("table", fn, deriv_step)

    # -- pointwise quantities -------------------------------------------------
    def eval(self, x) -> np.ndarray:
        return np.asarray(self._eval(np.asarray(x, dtype=float)), dtype=float)

    def inverse(self, x) -> np.ndarray:
        return _inv2(self.eval(x))

    def sqrt_det(self, x) -> np.ndarray:
        g = self.eval(x)
        return np.sqrt(g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0])

    def norm(self, x, v) -> np.ndarray:
        g = self.eval(x)
        return np.sqrt(np.einsum("...i,...ij,...j->...", v, g, v))

    def inner(self, x, u, v) -> np.ndarray:
        return np.einsum("...i,...ij,...j->...", u, self.eval(x), v)

    def derivative(self, x) -> np.ndarray:
        """``dg[..., a, i, j] = ∂_a g_ij`` by centered differences."""
        x = np.asarray(x, dtype=float)
        s = self.deriv_step
        out = np.empty(x.shape[:-1] + (2, 2, 2))
        for a in range(2):
            e = np.zeros(2)
            e[a] = s
            out[..., a, :, :] = (self.eval(x + e) - self.eval(x - e)) / (2 * s)
        return out

    def christoffel(self, x) -> np.ndarray:
        """``Γ[..., k, i, j] = Γ^k_ij`` (symmetric in i, j)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return np.zeros(x.shape[:-1] + (2, 2, 2))
        if self.conformal_factor is not None:
            # g = e^{2λ} δ: Γ^k_ij = δ_ki ∂_jλ + δ_kj ∂_iλ − δ_ij ∂_kλ
            s = self.deriv_step
            lam = self.conformal_factor
            dl = np.stack(
                [
                    (lam(x[..., 0] + s, x[..., 1]) - lam(x[..., 0] - s, x[..., 1])) / (2 * s),
                    (lam(x[..., 0], x[..., 1] + s) - lam(x[..., 0], x[..., 1] - s)) / (2 * s),
                ],
                axis=-1,
            )
            out = np.zeros(x.shape[:-1] + (2, 2, 2))
            for k in range(2):
                out[..., k, k, :] += dl
                out[..., k, :, k] += dl
                out[..., :, k, k] -= dl
            return out
        dg = self.derivative(x)
        ginv = self.inverse(x)
        # lower-index symbol Γ_{p i j} = ½ (∂_i g_jp + ∂_j g_ip − ∂_p g_ij)
        a = np.swapaxes(np.swapaxes(dg, -3, -1), -2, -1)  # [p, i, j] = ∂_i g_jp
        low = 0.5 * (a + np.swapaxes(a, -1, -2) - dg)
        shape = low.shape
        out = ginv @ low.reshape(shape[:-3] + (2, 4))
        return out.reshape(shape)

    def gauss_curvature(self, x, step: float = 1e-4) -> np.ndarray:
        """Gaussian curvature from Christoffel symbols and their differences."""
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return np.zeros(x.shape[:-1])
        gam = self.christoffel(x)
        dgam = np.empty(x.shape[:-1] + (2, 2, 2, 2))  # [c, k, i, j] = ∂_c Γ^k_ij
        for c in range(2):
            e = np.zeros(2)
            e[c] = step
            dgam[..., c, :, :, :] = (self.christoffel(x + e) - self.christoffel(x - e)) / (2 * step)
        # R^a_{212} = ∂_1 Γ^a_{22} − ∂_2 Γ^a_{12} + Γ^a_{1e} Γ^e_{22} − Γ^a_{2e} Γ^e_{12}
        r_up = (
            dgam[..., 0, :, 1, 1]
            - dgam[..., 1, :, 0, 1]
            + np.einsum("...ae,...e->...a", gam[..., :, 0, :], gam[..., :, 1, 1])
            - np.einsum("...ae,...e->...a", gam[..., :, 1, :], gam[..., :, 0, 1])
        )
        g = self.eval(x)
        r1212 = np.einsum("...a,...a->...", g[..., 0, :], r_up)
        det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] ** 2
        return r1212 / det


def _inv2(g: np.ndarray) -> np.ndarray:
    det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
    if np.any(det <= 0):
        raise np.linalg.LinAlgError("metric is singular or indefinite")
    out = np.empty_like(g)
    out[..., 0, 0] = g[..., 1, 1] / det
    out[..., 1, 1] = g[..., 0, 0] / det
    out[..., 0, 1] = -g[..., 0, 1] / det
    out[..., 1, 0] = -g[..., 1, 0] / det
    return out


def christoffel(g: MetricSpec, x) -> np.ndarray:
    return g.christoffel(x)


# --------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class DomainSpec:
    """Disk of radius ``radius`` centred at the origin; ``b(x) = |x|² − R²``."""

    radius: float = 1.0
    extension: float = 0.1

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("domain radius must be positive")

    def b(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.sum(x**2, axis=-1) - self.radius**2

    def extended(self) -> "DomainSpec":
        return DomainSpec(self.radius + self.extension, self.extension)

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    def boundary_point(self, angle) -> np.ndarray:
        angle = np.asarray(angle, dtype=float)
        return self.radius * np.stack([np.cos(angle), np.sin(angle)], axis=-1)

    def normal(self, g: MetricSpec, x) -> np.ndarray:
        """Outward g-unit normal ``ν = g^{-1} db / |db|_g``."""
        x = np.asarray(x, dtype=float)
        db = 2.0 * x
        ginv = g.inverse(x)
        up = np.einsum("...ij,...j->...i", ginv, db)
        return up / np.sqrt(np.einsum("...i,...i->...", up, db))[..., None]

    def tangent(self, g: MetricSpec, x) -> np.ndarray:
        """g-unit tangent, g-orthogonal to ν, counterclockwise."""
        x = np.asarray(x, dtype=float)
        t = np.stack([-x[..., 1], x[..., 0]], axis=-1)
        return t / g.norm(x, t)[..., None]


@dataclass(frozen=True)
class ConvexSet:
    """Closed disk ``|x − center| ≤ radius`` inside the domain."""

    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.3

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("convex set radius must be positive")

    def distance(self, x) -> np.ndarray:
        """Euclidean signed distance to the disk (negative inside)."""
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius

    def g_distance(self, g: MetricSpec, x) -> np.ndarray:
        """First-order g-distance: Euclidean distance times the local minimal metric scale."""
        x = np.asarray(x, dtype=float)
        lam_min = np.linalg.eigvalsh(g.eval(x))[..., 0]
        return self.distance(x) * np.sqrt(lam_min)

    def contained_in(self, dom: DomainSpec) -> bool:
        return float(np.linalg.norm(self.center)) + self.radius < dom.radius

    def check_convex(
        self, g: MetricSpec, n: int = 32, step: float = 5e-3, tol: float = 1e-8, max_iter: int = 40
    ) -> tuple[bool, float]:
        """Shoot geodesics between ``n`` boundary samples pairwise; all must stay in the disk.

        Returns ``(ok, worst excursion)`` where the excursion is the largest
        signed distance of any sample outside the disk.  If some two-point
        problem cannot be solved by shooting, convexity is not verified and
        the excursion is reported as ``inf``.
        """
        ang = 2 * np.pi * np.arange(n) / n
        pts = np.asarray(self.center) + self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        i, j = np.triu_indices(n, k=1)
        try:
            fan = shoot_batch(g, pts[i], pts[j], step=step, max_iter=max_iter)
        except ShootingError:
            return False, float("inf")
        d = self.distance(fan.positions)
        d = np.where(fan.valid, d, -np.inf)
        worst = float(np.max(d))
        return worst <= tol, worst


# --------------------------------------------------------------------------
# RK4 machinery


def _rhs(g: MetricSpec, x: np.ndarray, v: np.ndarray):
    gam = g.christoffel(x)
    if g.kind == "euclidean":
        return v, np.zeros_like(v)
    vv = (v[..., :, None] * v[..., None, :]).reshape(v.shape[:-1] + (4, 1))
    acc = -(gam.reshape(gam.shape[:-3] + (2, 4)) @ vv)[..., 0]
    return v, acc


def _rk4_step(g: MetricSpec, x, v, h):
    """One RK4 step; ``h`` broadcasts against the batch (shape (B,) or scalar)."""
    h = np.asarray(h, dtype=float)
    hh = h[..., None] if h.ndim else h
    k1x, k1v = _rhs(g, x, v)
    k2x, k2v = _rhs(g, x + 0.5 * hh * k1x, v + 0.5 * hh * k1v)
    k3x, k3v = _rhs(g, x + 0.5 * hh * k2x, v + 0.5 * hh * k2v)
    k4x, k4v = _rhs(g, x + hh * k3x, v + hh * k3v)
    xn = x + hh / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    vn = v + hh / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return xn, vn


def _find_event(
    g: MetricSpec,
    x0: np.ndarray,
    v0: np.ndarray,
    step: float,
    event: Callable[[np.ndarray, np.ndarray], np.ndarray],
    max_length: float,
    bisect_tol: float = 1e-10,
):
    """Integrate until ``event`` turns non-negative; return the event parameter.

    The event is monitored from the first step on, so a start exactly on the
    event surface (e.g. a boundary point) is allowed.  Returns ``(t_event,
    trapped)`` with ``trapped`` flagging geodesics that never triggered.
    """
    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    nb = x.shape[0]
    speed = np.sqrt(np.einsum("bi,bij,bj->b", v, g.eval(x), v))
    max_steps = np.ceil(max_length / (step * np.maximum(speed, 1e-300))).astype(int)
    t = np.zeros(nb)
    alive = np.ones(nb, dtype=bool)
    t_event = np.full(nb, np.nan)
    xs = np.empty_like(x)
    vs = np.empty_like(v)
    k = 0
    while np.any(alive):
        idx = np.nonzero(alive)[0]
        xn, vn = _rk4_step(g, x[idx], v[idx], step)
        hit = event(xn, vn) >= 0
        if np.any(hit):
            hi = idx[hit]
            xs[hi], vs[hi] = x[hi], v[hi]
            t_event[hi] = t[hi]
            alive[hi] = False
        keep = idx[~hit]
        x[keep], v[keep] = xn[~hit], vn[~hit]
        t[keep] += step
        k += 1
        over = alive & (k >= max_steps)
        if np.any(over):
            alive[over] = False
        if k > max_steps.max() + 1:
            break
    trapped = np.isnan(t_event)
    done = ~trapped
    if np.any(done):
        idx = np.nonzero(done)[0]
        lo = np.zeros(idx.size)
        hi = np.full(idx.size, step)
        while np.max(hi - lo) > bisect_tol:
            mid = 0.5 * (lo + hi)
            xm, vm = _rk4_step(g, xs[idx], vs[idx], mid)
            pos = event(xm, vm) >= 0
            hi = np.where(pos, mid, hi)
            lo = np.where(pos, lo, mid)
        t_event[idx] += 0.5 * (lo + hi)
    return t_event, trapped


def simpson_weights(n_intervals: int, h: float) -> np.ndarray:
    """Composite Simpson weights for an even number of equal intervals."""
    if n_intervals % 2:
        raise ValueError("Simpson's rule needs an even number of intervals")
    w = np.full(n_intervals + 1, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return w * h / 3.0


def _sample_uniform(g: MetricSpec, x0, v0, lengths, step: float):
    """Retrace each geodesic on a uniform grid ending exactly at its length."""
    nb = x0.shape[0]
    counts = np.maximum(2, 2 * np.ceil(lengths / (2 * step)).astype(int))
    hs = lengths / counts
    s_max = int(counts.max()) + 1
    pos = np.empty((nb, s_max, 2))
    vel = np.empty((nb, s_max, 2))
    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    pos[:, 0], vel[:, 0] = x, v
    for s in range(1, s_max):
        active = counts >= s
        h_s = np.where(active, hs, 0.0)
        x, v = _rk4_step(g, x, v, h_s)
        pos[:, s], vel[:, s] = x, v
    ts = np.arange(s_max)[None, :] * hs[:, None]
    weights = np.zeros((nb, s_max))
    for b in range(nb):
        weights[b, : counts[b] + 1] = simpson_weights(int(counts[b]), hs[b])
    ts = np.minimum(ts, lengths[:, None])
    return ts, pos, vel, weights, counts


# --------------------------------------------------------------------------
# geodesic containers


@dataclass(frozen=True, eq=False)
class Geodesic:
    """A traced geodesic: uniform samples on ``[0, exit_param]``."""

    start: np.ndarray
    direction: np.ndarray
    step: float
    t: np.ndarray = field(repr=False)
    positions: np.ndarray = field(repr=False)
    velocities: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    exit_param: float = 0.0
    boundary_angle: float = float("nan")
    dir_angle: float = float("nan")

    @property
    def samples(self):
        return list(zip(self.t, self.positions, self.velocities))


@dataclass(frozen=True, eq=False)
class Fan:
    """A batch of geodesics with padded sample arrays.

    ``positions``/``velocities`` have shape ``(G, S, 2)``; entries past a
    geodesic's own sample count repeat its endpoint and carry zero Simpson
    weight, so quadratures can be written as plain sums over ``S``.
    """

    starts: np.ndarray
    directions: np.ndarray
    step: float
    t: np.ndarray = field(repr=False)
    positions: np.ndarray = field(repr=False)
    velocities: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)
    exit_params: np.ndarray = field(repr=False)
    boundary_angles: np.ndarray = field(repr=False)
    dir_angles: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.starts.shape[0]

    @property
    def valid(self) -> np.ndarray:
        """``(G, S)`` flags of real (non-padded) samples."""
        return np.arange(self.t.shape[1])[None, :] <= self.counts[:, None]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self))

    def __getitem__(self, i: int) -> Geodesic:
        c = int(self.counts[i]) + 1
        return Geodesic(
            self.starts[i],
            self.directions[i],
            self.step,
            self.t[i, :c],
            self.positions[i, :c],
            self.velocities[i, :c],
            self.weights[i, :c],
            float(self.exit_params[i]),
            float(self.boundary_angles[i]),
            float(self.dir_angles[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, keep) -> "Fan":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.nonzero(keep)[0]
        s_max = int(self.counts[keep].max()) + 1 if keep.size else 1
        return Fan(
            self.starts[keep],
            self.directions[keep],
            self.step,
            self.t[keep, :s_max],
            self.positions[keep, :s_max],
            self.velocities[keep, :s_max],
            self.weights[keep, :s_max],
            self.counts[keep],
            self.exit_params[keep],
            self.boundary_angles[keep],
            self.dir_angles[keep],
        )


def trace_batch(
    g: MetricSpec,
    dom: DomainSpec,
    starts,
    directions,
    step: float = 1e-3,
    boundary_angles=None,
    dir_angles=None,
    threads: int = 1,
) -> Fan:
    """Trace geodesics from ``starts`` with initial velocities ``directions``
    until they leave ``dom``.

    Raises :class:`TrappedGeodesicError` when a geodesic's arc length
    exceeds ``10 * diam(dom)`` without exiting.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    if step <= 0:
        raise ValueError("step must be positive")
    if starts.shape != directions.shape:
        raise ValueError("starts and directions must have the same shape")
    nb = starts.shape[0]
    if nb == 0:
        raise ValueError("nothing to trace")
    ba = np.full(nb, np.nan) if boundary_angles is None else np.asarray(boundary_angles, float)
    da = np.full(nb, np.nan) if dir_angles is None else np.asarray(dir_angles, float)

    if threads > 1 and nb > 1:
        from concurrent.futures import ThreadPoolExecutor

        chunks = np.array_split(np.arange(nb), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(
                pool.map(
                    lambda c: trace_batch(g, dom, starts[c], directions[c], step, ba[c], da[c]),
                    [c for c in chunks if c.size],
                )
            )
        return _concat_fans(parts)

    lengths, trapped = _find_event(
        g, starts, directions, step, lambda x, v: dom.b(x), max_length=10.0 * dom.diameter
    )
    if np.any(trapped):
        raise TrappedGeodesicError(
            f"{int(trapped.sum())} geodesic(s) did not exit within {10 * dom.diameter:.3g} arc length"
        )
    ts, pos, vel, w, counts = _sample_uniform(g, starts, directions, lengths, step)
    return Fan(starts, directions, step, ts, pos, vel, w, counts, lengths, ba, da)


def _concat_fans(parts: Sequence[Fan]) -> Fan:
    s_max = max(p.t.shape[1] for p in parts)

    def pad(a, fill_last=True):
        out = []
        for arr in a:
            extra = s_max - arr.shape[1]
            if extra:
                tail = np.repeat(arr[:, -1:], extra, axis=1) if fill_last else np.zeros(
                    (arr.shape[0], extra) + arr.shape[2:]
                )
                arr = np.concatenate([arr, tail], axis=1)
            out.append(arr)
        return np.concatenate(out, axis=0)

    return Fan(
        np.concatenate([p.starts for p in parts]),
        np.concatenate([p.directions for p in parts]),
        parts[0].step,
        pad([p.t for p in parts]),
        pad([p.positions for p in parts]),
        pad([p.velocities for p in parts]),
        pad([p.weights for p in parts], fill_last=False),
        np.concatenate([p.counts for p in parts]),
        np.concatenate([p.exit_params for p in parts]),
        np.concatenate([p.boundary_angles for p in parts]),
        np.concatenate([p.dir_angles for p in parts]),
    )


def trace_geodesic(g: MetricSpec, dom: DomainSpec, x, xi, step: float = 1e-3) -> Geodesic:
    """Trace a single geodesic from ``x`` with initial velocity ``xi`` to its exit."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if abs(float(dom.b(x))) < 1e-9 * dom.radius**2:
        nu = dom.normal(g, x)
        if float(g.inner(x, xi, nu)) >= 0:
            raise ValueError("direction must point into the domain (<xi, nu>_g < 0)")
    return trace_batch(g, dom, x[None], xi[None], step)[0]


def make_fan(
    g: MetricSpec,
    dom: DomainSpec,
    n_points: int,
    n_dirs: int,
    step: float = 1e-3,
    threads: int = 1,
) -> Fan:
    """Geodesics from ``n_points`` equally spaced boundary points, ``n_dirs``
    equally spaced inward angles each.

    The inward angle ``α`` is measured from the inward g-normal in a
    g-orthonormal frame, ``α_j = −π/2 + π (j + ½) / n_dirs``; the initial
    direction is ``−cos α ν + sin α τ``.
    """
    if n_points < 1 or n_dirs < 1:
        raise ValueError("fan counts must be at least 1")
    phi = 2 * np.pi * np.arange(n_points) / n_points
    alpha = -0.5 * np.pi + np.pi * (np.arange(n_dirs) + 0.5) / n_dirs
    pp, aa = np.meshgrid(phi, alpha, indexing="ij")
    pp, aa = pp.ravel(), aa.ravel()
    x = dom.boundary_point(pp)
    nu = dom.normal(g, x)
    tau = dom.tangent(g, x)
    xi = -np.cos(aa)[:, None] * nu + np.sin(aa)[:, None] * tau
    return trace_batch(g, dom, x, xi, step, pp, aa, threads=threads)


# --------------------------------------------------------------------------
# simplicity


@dataclass
class SimplicityReport:
    convex_ok: bool
    convex_margin: float
    conjugate_ok: bool
    jacobi_margin: float
    n_geodesics: int
    n_conjugate_failures: int

    @property
    def passed(self) -> bool:
        return self.convex_ok and self.conjugate_ok

    def summary(self) -> str:
        return (
            f"boundary convexity: {'ok' if self.convex_ok else 'FAIL'} "
            f"(worst margin {self.convex_margin:.4g}); "
            f"conjugate points: {'none' if self.conjugate_ok else 'FOUND'} "
            f"(worst J/t {self.jacobi_margin:.4g}, {self.n_conjugate_failures}/{self.n_geodesics} failing)"
        )


def boundary_convexity(g: MetricSpec, dom: DomainSpec, n: int = 256) -> np.ndarray:
    """Second fundamental form ``<∇_ξ ν, ξ>`` for unit tangents at ``n`` boundary points."""
    phi = 2 * np.pi * np.arange(n) / n
    x = dom.boundary_point(phi)
    xi = dom.tangent(g, x)
    gam = g.christoffel(x)
    db = 2.0 * x
    hess = 2.0 * np.einsum("bi,bi->b", xi, xi) - np.einsum("bkij,bi,bj,bk->b", gam, xi, xi, db)
    ginv = g.inverse(x)
    grad_norm = np.sqrt(np.einsum("bi,bij,bj->b", db, ginv, db))
    return hess / grad_norm


def jacobi_along(fan: Fan, curvature: np.ndarray) -> np.ndarray:
    """Solve ``J'' + K J = 0``, ``J(0)=0``, ``J'(0)=1`` on each geodesic.

    ``curvature`` is K at the fan samples, shape ``(G, S)``.  RK4 uses step
    ``2 h`` so that stage midpoints fall on samples; returns J at the even
    samples (NaN beyond a geodesic's range).
    """
    nb, s_max = fan.t.shape
    hs = fan.exit_params / fan.counts
    n_even = (s_max - 1) // 2 + 1
    out = np.full((nb, n_even), np.nan)
    j = np.zeros(nb)
    dj = np.ones(nb)
    out[:, 0] = 0.0
    for k in range(1, n_even):
        s0 = 2 * (k - 1)
        active = fan.counts >= 2 * k
        h2 = np.where(active, 2 * hs, 0.0)
        k0, k1, k2 = curvature[:, s0], curvature[:, s0 + 1], curvature[:, s0 + 2]
        a1j, a1d = dj, -k0 * j
        a2j, a2d = dj + 0.5 * h2 * a1d, -k1 * (j + 0.5 * h2 * a1j)
        a3j, a3d = dj + 0.5 * h2 * a2d, -k1 * (j + 0.5 * h2 * a2j)
        a4j, a4d = dj + h2 * a3d, -k2 * (j + h2 * a3j)
        j = j + h2 / 6 * (a1j + 2 * a2j + 2 * a3j + a4j)
        dj = dj + h2 / 6 * (a1d + 2 * a2d + 2 * a3d + a4d)
        out[:, k] = np.where(active, j, np.nan)
    return out


def simplicity_check(
    g: MetricSpec,
    dom: DomainSpec,
    n_boundary: int = 256,
    n_points: int = 32,
    n_dirs: int = 16,
    step: float = 1e-2,
) -> SimplicityReport:
    """Strict boundary convexity and absence of conjugate points along a fan."""
    margins = boundary_convexity(g, dom, n_boundary)
    fan = make_fan(g, dom, n_points, n_dirs, step)
    speed = g.norm(fan.positions[:, 0], fan.velocities[:, 0])
    kurv = g.gauss_curvature(fan.positions)
    jac = jacobi_along(fan, kurv)
    t_even = fan.t[:, ::2][:, : jac.shape[1]] * speed[:, None]
    ratio = np.where(t_even > 0, jac / np.where(t_even > 0, t_even, 1.0), np.inf)
    ratio = np.where(np.isnan(ratio), np.inf, ratio)
    worst = ratio.min(axis=1)
    failing = int(np.sum(worst <= 0))
    return SimplicityReport(
        convex_ok=bool(np.all(margins > 0)),
        convex_margin=float(margins.min()),
        conjugate_ok=failing == 0,
        jacobi_margin=float(worst.min()),
        n_geodesics=len(fan),
        n_conjugate_failures=failing,
    )


# --------------------------------------------------------------------------
# two-point problem


def _unit_dir(g: MetricSpec, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    d = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    return d / g.norm(x, d)[..., None]


def _closest_approach(g: MetricSpec, x, y, theta, step):
    """Shoot at angle ``theta``; return the closest-approach parameter, point and signed offset."""
    v0 = _unit_dir(g, x, theta)
    scale = np.sqrt(np.linalg.eigvalsh(g.eval(np.concatenate([x, y])))[..., 1]).max()
    length = 10.0 * float(np.max(np.linalg.norm(y - x, axis=-1))) * scale + 10 * step
    t_event, trapped = _find_event_targets(g, x, v0, step, y, length)
    if np.any(trapped):
        raise ShootingError(f"{int(trapped.sum())} shot(s) never approached their target")
    pos_end, vel_end = _endpoint(g, x, v0, t_event, step)
    unit = vel_end / np.linalg.norm(vel_end, axis=-1)[:, None]
    offset = unit[:, 0] * (pos_end - y)[:, 1] - unit[:, 1] * (pos_end - y)[:, 0]
    return t_event, pos_end, offset


def _find_event_targets(g, x0, v0, step, targets, max_length, bisect_tol=1e-12):
    """Closest-approach event for a batch with per-geodesic targets."""
    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    nb = x.shape[0]
    max_steps = int(np.ceil(max_length / step))
    t = np.zeros(nb)
    alive = np.ones(nb, dtype=bool)
    t_event = np.full(nb, np.nan)
    xs = np.empty_like(x)
    vs = np.empty_like(v)
    # a geodesic that starts at its target has reached it
    zero = np.linalg.norm(targets - x, axis=-1) == 0
    t_event[zero] = 0.0
    alive[zero] = False
    for _ in range(max_steps):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        xn, vn = _rk4_step(g, x[idx], v[idx], step)
        hit = np.einsum("bi,bi->b", xn - targets[idx], vn) >= 0
        if np.any(hit):
            hi = idx[hit]
            xs[hi], vs[hi] = x[hi], v[hi]
            t_event[hi] = t[hi]
            alive[hi] = False
        keep = idx[~hit]
        x[keep], v[keep] = xn[~hit], vn[~hit]
        t[keep] += step
    trapped = np.isnan(t_event)
    refine = np.nonzero(~trapped & ~zero)[0]
    if refine.size:
        lo = np.zeros(refine.size)
        hi = np.full(refine.size, step)
        while np.max(hi - lo) > bisect_tol:
            mid = 0.5 * (lo + hi)
            xm, vm = _rk4_step(g, xs[refine], vs[refine], mid)
            pos = np.einsum("bi,bi->b", xm - targets[refine], vm) >= 0
            hi = np.where(pos, mid, hi)
            lo = np.where(pos, lo, mid)
        t_event[refine] += 0.5 * (lo + hi)
    return t_event, trapped


def _endpoint(g, x0, v0, lengths, step):
    """Integrate each geodesic to parameter ``lengths`` with near-``step`` uniform steps."""
    counts = np.maximum(1, np.ceil(lengths / step).astype(int))
    hs = lengths / counts
    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    for s in range(1, int(counts.max()) + 1):
        h_s = np.where(counts >= s, hs, 0.0)
        x, v = _rk4_step(g, x, v, h_s)
    return x, v


def shoot_batch(
    g: MetricSpec,
    x,
    y,
    step: float = 1e-3,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> Fan:
    """Solve the two-point problem from ``x[b]`` to ``y[b]`` by shooting.

    The initial angle is corrected by secant iterations on the signed
    perpendicular offset at closest approach.  Returns a :class:`Fan`
    whose members run from ``x`` to (within ``tol``) ``y`` at unit speed.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    d = y - x
    th0 = np.arctan2(d[:, 1], d[:, 0])
    t0, p0, f0 = _closest_approach(g, x, y, th0, step)
    err = np.linalg.norm(p0 - y, axis=-1)
    if np.all(err < tol):
        return _segment(g, x, th0, t0, step)
    th1 = th0 + 1e-3
    t1, p1, f1 = _closest_approach(g, x, y, th1, step)
    for _ in range(max_iter):
        err = np.linalg.norm(p1 - y, axis=-1)
        if np.all(err < tol):
            return _segment(g, x, th1, t1, step)
        denom = f1 - f0
        safe = np.abs(denom) > 1e-300
        th2 = np.where(safe & (err >= tol), th1 - f1 * (th1 - th0) / np.where(safe, denom, 1.0), th1)
        th0, f0 = th1, f1
        th1 = th2
        t1, p1, f1 = _closest_approach(g, x, y, th1, step)
    err = np.linalg.norm(p1 - y, axis=-1)
    raise ShootingError(f"shooting did not converge: worst endpoint error {err.max():.3e}")


def _segment(g: MetricSpec, x, theta, lengths, step) -> Fan:
    v0 = _unit_dir(g, x, theta)
    ts, pos, vel, w, counts = _sample_uniform(g, x, v0, lengths, step)
    nan = np.full(x.shape[0], np.nan)
    return Fan(x, v0, step, ts, pos, vel, w, counts, lengths, nan, nan)


def geodesic_between(g: MetricSpec, x, y, step: float = 1e-3, tol: float = 1e-8) -> Geodesic:
    """Unit-speed geodesic segment from ``x`` to ``y`` (shooting + secant)."""
    return shoot_batch(g, np.asarray(x, float)[None], np.asarray(y, float)[None], step, tol)[0]
