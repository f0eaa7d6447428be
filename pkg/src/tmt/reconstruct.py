"""Discrete moment operators and regularized inversion.

Unknowns are packed components at every grid node (C order, index
``node * K + component``).  Each sinogram row is the Simpson quadrature of
``t^q <f, γ̇^m>`` with ``f`` bilinearly interpolated from the grid, so the
matrix reproduces :func:`tmt.transforms.moment_transform` on a grid field
exactly.

Inversion minimizes

    ``‖A f - d‖²_fan + λ ‖δ f‖²_g + λ_b ‖f outside the mask‖²_g``

by CGLS (conjugate gradients on the normal equations), where ``‖·‖_fan``
weights each geodesic by its share of the fan measure.  For scalars the
divergence is replaced by the gradient.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .decomposition import SolverError
from .fields import Grid, SymTensorField
from .geometry import ConvexSet, DomainSpec, Fan, MetricSpec, make_fan
from .gridops import d_matrix, delta_matrix, node_block_diag
from .symtensor import metric_gram, n_components, packing, sym_power
from .transforms import MomentSinogram, _check_q, moment_values

logger = logging.getLogger(__name__)

__all__ = [
    "ForwardOperator",
    "InversionResult",
    "CascadeReconstruction",
    "SupportReport",
    "assemble_forward",
    "coverage",
    "solenoidal_invert",
    "cascade_reconstruct",
    "compose_grid",
    "avoiding_mask",
    "support_experiment",
    "BOUNDARY_WEIGHT",
    "TIKHONOV",
    "cgls",
]

BOUNDARY_WEIGHT = 1e3
TIKHONOV = 1e-6
_CHUNK_ENTRIES = 4_000_000


@dataclass(frozen=True, eq=False)
class ForwardOperator:
    """Sparse ``I^q`` on grid fields of one tensor order over one fan."""

    matrix: sp.csr_matrix = field(repr=False)
    q: int
    order: int
    grid: Grid
    ids: np.ndarray = field(repr=False)
    boundary_angles: np.ndarray = field(repr=False)
    dir_angles: np.ndarray = field(repr=False)
    row_weight: float = 1.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def apply(self, f) -> np.ndarray:
        vals = f.values if isinstance(f, SymTensorField) else np.asarray(f)
        return self.matrix @ vals.ravel()

    def sinogram(self, f) -> MomentSinogram:
        return MomentSinogram(self.q, self.order, self.boundary_angles, self.dir_angles, self.apply(f))


def _fan_weight(fan: Fan) -> float:
    # boundary angle spacing times inward angle spacing, 2π · π / G
    return 2.0 * math.pi**2 / len(fan)


def assemble_forward(
    fan: Fan, grid: Grid, g: MetricSpec | None = None, q: int | list = 0, order: int = 0, row_weight: float | None = None
):
    """Matrices of ``I^q`` for one ``q`` (a :class:`ForwardOperator`) or a list of them.

    ``g`` is accepted for symmetry with the other operators; the metric
    enters only through the traced fan.
    """
    if len(fan) == 0:
        raise ValueError("cannot assemble a forward operator on an empty fan")
    qs = [_check_q(x) for x in np.atleast_1d(q)]
    if row_weight is None:
        row_weight = _fan_weight(fan)
    k = n_components(2, order)
    mult = packing(2, order).multiplicity
    n_geo, n_s = fan.t.shape
    ncols = grid.n * grid.n * k
    chunk = max(1, _CHUNK_ENTRIES // (n_s * 4 * k))
    blocks: list[list[sp.csr_matrix]] = [[] for _ in qs]
    for lo in range(0, n_geo, chunk):
        sl = slice(lo, min(lo + chunk, n_geo))
        rows_here = sl.stop - sl.start
        ii, jj, wb = grid.bilinear(fan.positions[sl])
        mono = sym_power(fan.velocities[sl], order) * mult  # (G, S, K)
        node = ii * grid.n + jj  # (G, S, 4)
        cols = (node[..., None] * k + np.arange(k)).reshape(rows_here, -1)
        rows = np.broadcast_to(np.arange(rows_here)[:, None], cols.shape)
        base = wb[..., None] * mono[..., None, :]  # (G, S, 4, K)
        for iq, qq in enumerate(qs):
            quad = fan.weights[sl] * fan.t[sl] ** qq
            vals = (quad[..., None, None] * base).reshape(rows_here, -1)
            mat = sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(rows_here, ncols))
            mat.sum_duplicates()
            blocks[iq].append(mat)
    ops = [
        ForwardOperator(
            sp.vstack(b, format="csr"), qq, order, grid, fan.ids, fan.boundary_angles, fan.dir_angles, row_weight
        )
        for b, qq in zip(blocks, qs)
    ]
    return ops[0] if np.ndim(q) == 0 else ops


def coverage(op: ForwardOperator, mask: np.ndarray) -> np.ndarray:
    """Masked nodes whose value influences no sinogram row."""
    k = n_components(2, op.order)
    touched = np.asarray(abs(op.matrix).sum(axis=0)).ravel().reshape(-1, k).sum(axis=1) > 0
    return mask & ~touched.reshape(mask.shape)


# --------------------------------------------------------------------------
# regularized inversion


def _sqrt_weight(grid: Grid, g: MetricSpec, order: int, nodes: np.ndarray, square: bool = False) -> sp.csr_matrix:
    """``R`` with ``x·Wx = ‖R x‖²`` restricted to rows of ``nodes`` (bool, N×N);
    ``square`` restricts the columns too."""
    pts = grid.points().reshape(-1, 2)
    gram = metric_gram(g.inverse(pts), order) * (g.sqrt_det(pts) * grid.spacing**2)[:, None, None]
    chol = np.swapaxes(np.linalg.cholesky(gram), -1, -2)  # upper factor per node
    full = node_block_diag(chol)
    k = n_components(2, order)
    keep = (np.flatnonzero(nodes.ravel())[:, None] * k + np.arange(k)).ravel()
    full = full[keep]
    return full[:, keep] if square else full


def _stencil_interior(mask: np.ndarray) -> np.ndarray:
    """Masked nodes whose 4 grid neighbours are masked too."""
    inner = mask.copy()
    inner[1:, :] &= mask[:-1, :]
    inner[:-1, :] &= mask[1:, :]
    inner[:, 1:] &= mask[:, :-1]
    inner[:, :-1] &= mask[:, 1:]
    inner[0, :] = inner[-1, :] = inner[:, 0] = inner[:, -1] = False
    return inner


@dataclass
class InversionResult:
    field: SymTensorField
    iterations: int
    residual_history: list = field(repr=False)
    data_residual: float = 0.0
    uncovered: int = 0
    warnings: list = field(default_factory=list)


def cgls(a: sp.spmatrix, b: np.ndarray, rtol: float = 1e-8, max_iter: int = 5000, atol: float = 0.0):
    """CG on ``AᵀA x = Aᵀb`` in least-squares form.

    Stops when ``‖Aᵀr‖ ≤ max(rtol ‖Aᵀb‖, atol)``.  Returns ``(x, iterations,
    history of ‖r‖, converged)``; ``‖r‖`` is non-increasing.
    """
    x = np.zeros(a.shape[1])
    r = b.copy()
    s = a.T @ r
    p = s.copy()
    gamma = float(s @ s)
    target = max(rtol**2 * gamma, atol**2)
    history = [float(np.linalg.norm(r))]
    if gamma <= target:
        return x, 0, history, True
    for it in range(1, max_iter + 1):
        qv = a @ p
        alpha = gamma / float(qv @ qv)
        x += alpha * p
        r -= alpha * qv
        history.append(float(np.linalg.norm(r)))
        s = a.T @ r
        gamma_new = float(s @ s)
        if gamma_new <= target:
            return x, it, history, True
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return x, max_iter, history, False


def solenoidal_invert(
    sino: MomentSinogram | np.ndarray,
    op: ForwardOperator,
    g: MetricSpec,
    mask: np.ndarray,
    lam: float = 1e-3,
    rtol: float = 1e-8,
    max_iter: int = 5000,
    boundary_weight: float = BOUNDARY_WEIGHT,
    tikhonov: float = TIKHONOV,
    reference: np.ndarray | None = None,
    vanishing_boundary: bool = False,
) -> InversionResult:
    """Least-squares preimage of ``I^{op.q}`` data with the δ-penalty.

    ``mask`` marks the reconstruction region; values outside it are
    penalized with ``boundary_weight``.  A small ``tikhonov`` multiple of
    ``‖f‖²_g`` removes the discrete null space; CGLS runs on the
    column-normalized system.  ``reference`` is a data vector of the
    expected magnitude: the stopping test is also met once the normal
    residual falls below ``rtol`` times its normal right-hand side, which
    matters when ``sino`` itself is at roundoff level.
    ``vanishing_boundary`` extends the smoothing penalty across the mask
    edge, for unknowns known to vanish there.
    """
    data = sino.values if isinstance(sino, MomentSinogram) else np.asarray(sino, dtype=float)
    if data.shape != (op.shape[0],):
        raise ValueError(f"data has {data.shape[0]} rows, operator expects {op.shape[0]}")
    grid, order = op.grid, op.order
    mask = np.asarray(mask, dtype=bool)
    warnings = []
    gaps = int(coverage(op, mask).sum())
    if gaps:
        warnings.append(f"{gaps} reconstruction nodes are crossed by no geodesic")
        logger.warning(warnings[-1])
    if order == 0:
        reg, reg_order = d_matrix(grid, g, 0), 1
    else:
        reg, reg_order = delta_matrix(grid, g, order), order - 1
    k_reg = n_components(2, reg_order)
    inner = np.ones(grid.shape, dtype=bool) if vanishing_boundary else _stencil_interior(mask)
    reg_rows = (np.flatnonzero(inner.ravel())[:, None] * k_reg + np.arange(k_reg)).ravel()
    reg = _sqrt_weight(grid, g, reg_order, inner, square=True) @ reg[reg_rows]
    outside = _sqrt_weight(grid, g, order, ~mask)
    sw = math.sqrt(op.row_weight)
    blocks = [sw * op.matrix, math.sqrt(lam) * reg, math.sqrt(boundary_weight) * outside]
    if tikhonov > 0:
        blocks.append(math.sqrt(tikhonov) * _sqrt_weight(grid, g, order, np.ones(grid.shape, dtype=bool)))
    stacked = sp.vstack(blocks, format="csr")
    rhs = np.concatenate([sw * data, np.zeros(stacked.shape[0] - data.size)])
    scale = np.sqrt(np.asarray(stacked.multiply(stacked).sum(axis=0)).ravel())
    scale[scale == 0] = 1.0
    system = stacked @ sp.diags(1.0 / scale)
    atol = 0.0
    if reference is not None:
        ref = np.zeros_like(rhs)
        ref[: data.size] = sw * np.asarray(reference, dtype=float)
        atol = rtol * float(np.linalg.norm(system.T @ ref))
    y, iters, hist, ok = cgls(system, rhs, rtol, max_iter, atol)
    x = y / scale
    if not ok:
        raise SolverError(f"CGLS did not reach rtol={rtol:g} within {max_iter} iterations", hist[-1])
    vals = x.reshape(grid.shape + (n_components(2, order),))
    fld = SymTensorField(order, grid, vals, np.ones(grid.shape, dtype=bool))
    resid = float(np.linalg.norm(op.matrix @ x - data))
    return InversionResult(fld, iters, hist, resid, gaps, warnings)


# --------------------------------------------------------------------------
# moment cascade


def compose_grid(parts, g: MetricSpec) -> SymTensorField:
    """``Σ_i d^i parts[i]`` with the grid ``d`` matrix (no masking)."""
    total = None
    for i, p in enumerate(parts):
        vals = p.values.ravel()
        order = p.order
        for _ in range(i):
            vals = d_matrix(p.grid, g, order) @ vals
            order += 1
        term = vals
        total = term if total is None else total + term
    grid = parts[0].grid
    order = parts[0].order
    return SymTensorField(order, grid, total.reshape(grid.shape + (-1,)), np.ones(grid.shape, dtype=bool))


@dataclass
class CascadeReconstruction:
    parts: list  # v̂_0 (order m) ... v̂_m (order 0)
    f_hat: SymTensorField
    stage_residuals: list
    stage_iterations: list
    rel_error: float | None = None
    warnings: list = field(default_factory=list)

    def masked_norm(self, mask: np.ndarray) -> float:
        return self.f_hat.norm(weights=np.asarray(mask, dtype=float))


def cascade_reconstruct(
    sinos,
    fan: Fan,
    g: MetricSpec,
    grid: Grid,
    lam: float = 1e-3,
    mask: np.ndarray | None = None,
    radius: float = 1.0,
    truth=None,
    rtol: float = 1e-8,
    max_iter: int = 5000,
    row_weight: float | None = None,
) -> CascadeReconstruction:
    """Peel ``v̂_0 .. v̂_m`` from ``I^0 .. I^m`` data, ``m = len(sinos) - 1``.

    Stage ``k + 1`` inverts ``(-1)^{k+1}/(k+1)! (I^{k+1} f - I^{k+1} Σ_{i<=k} d^i v̂_i)``
    at tensor order ``m - k - 1``.  ``truth`` (a grid or analytic field)
    enables the relative L² error on ``mask``.
    """
    data = [s.values if isinstance(s, MomentSinogram) else np.asarray(s, dtype=float) for s in sinos]
    m = len(data) - 1
    if m < 0:
        raise ValueError("need at least the I^0 sinogram")
    for i, s in enumerate(sinos):
        if isinstance(s, MomentSinogram) and s.q != i:
            raise ValueError(f"sinogram {i} has moment order {s.q}")
    if mask is None:
        mask = grid.disk_mask(radius)
    ops = {}  # (q, order) -> ForwardOperator

    def op_for(qq, order):
        key = (qq, order)
        if key not in ops:
            ops[key] = assemble_forward(fan, grid, g, qq, order, row_weight)
        return ops[key]

    # the largest measured moment (with its stage factor) sets the stopping floor
    reference = max((d / math.factorial(i) for i, d in enumerate(data)), key=lambda d: float(np.linalg.norm(d)))
    parts, residuals, iters, warns = [], [], [], []
    for k in range(m + 1):
        order = m - k
        if k == 0:
            rhs = data[0]
        else:
            current = compose_grid(parts, g)
            pred = op_for(k, m).matrix @ current.values.ravel()
            rhs = (-1) ** k / math.factorial(k) * (data[k] - pred)
        # the scalar potential of the last stage vanishes on the boundary
        res = solenoidal_invert(
            rhs, op_for(0, order), g, mask, lam, rtol, max_iter, reference=reference,
            vanishing_boundary=(k == m and m > 0),
        )
        parts.append(res.field)
        residuals.append(res.residual_history)
        iters.append(res.iterations)
        warns.extend(res.warnings)
    f_hat = compose_grid(parts, g)
    rel = None
    if truth is not None:
        tv = truth.values if isinstance(truth, SymTensorField) else truth.evaluate(grid.points())
        w = np.asarray(mask, dtype=float)
        diff = f_hat.with_values(f_hat.values - tv)
        ref = f_hat.with_values(tv)
        denom = ref.norm(weights=w)
        rel = diff.norm(weights=w) / denom if denom > 0 else diff.norm(weights=w)
    return CascadeReconstruction(parts, f_hat, residuals, iters, rel, sorted(set(warns)))


# --------------------------------------------------------------------------
# support experiment


def avoiding_mask(fan: Fan, k_set: ConvexSet, g: MetricSpec, margin: float = 0.02) -> np.ndarray:
    """Geodesics whose samples all stay more than ``margin`` (g-distance) from ``K``."""
    dist = k_set.g_distance(g, fan.positions)
    dist = np.where(fan.valid, dist, np.inf)
    return dist.min(axis=1) > margin


def _covered_nodes(fan: Fan, grid: Grid) -> np.ndarray:
    """Nodes of every cell crossed by a geodesic sample."""
    ii, jj, w = grid.bilinear(fan.positions[fan.valid])
    out = np.zeros(grid.shape, dtype=bool)
    hit = w > 0
    out[ii[hit], jj[hit]] = True
    return out


@dataclass
class SupportReport:
    n_fan: int
    n_avoiding: int
    max_moments: dict  # q -> max |I^q f| over the avoiding fan
    covered: np.ndarray = field(repr=False)
    zero_data_norm: float = 0.0
    data_norm: float = 0.0
    convex_ok: bool = True
    convex_margin: float = 0.0


def support_experiment(
    f,
    k_set: ConvexSet,
    g: MetricSpec,
    grid: Grid,
    dom: DomainSpec | None = None,
    fan: Fan | None = None,
    n_points: int = 64,
    n_dirs: int = 32,
    step: float = 5e-3,
    margin: float = 0.02,
    lam: float = 1e-3,
    region=None,
    invert: bool = True,
) -> SupportReport:
    """Forward moments of ``f`` on geodesics avoiding ``K`` and the
    reconstruction from data on those geodesics only.

    ``region`` (bool N×N) restricts the reconstruction region further; by
    default it is every node of a cell crossed by an avoiding geodesic.
    """
    dom = DomainSpec(1.0) if dom is None else dom
    ok, cmargin = k_set.check_convex(g)
    if not ok:
        raise ValueError(f"K is not geodesically convex (margin {cmargin:.3e})")
    if fan is None:
        fan = make_fan(g, dom, n_points, n_dirs, step)
    keep = avoiding_mask(fan, k_set, g, margin)
    sub = fan.subset(keep)
    m = f.order
    moms = moment_values(f, sub, list(range(m + 1))) if len(sub) else np.zeros((m + 1, 0))
    max_moments = {q: float(np.abs(moms[q]).max()) if moms.shape[1] else 0.0 for q in range(m + 1)}
    covered = _covered_nodes(sub, grid) & grid.disk_mask(dom.radius)
    if region is not None:
        covered = covered & np.asarray(region, dtype=bool)
    zero_norm = data_norm = 0.0
    if invert and len(sub):
        w = _fan_weight(fan)
        zero = cascade_reconstruct([np.zeros(len(sub))] * (m + 1), sub, g, grid, lam, covered, row_weight=w)
        zero_norm = zero.masked_norm(covered)
        rec = cascade_reconstruct(list(moms), sub, g, grid, lam, covered, row_weight=w)
        data_norm = rec.masked_norm(covered)
    return SupportReport(len(fan), int(keep.sum()), max_moments, covered, zero_norm, data_norm, ok, cmargin)
