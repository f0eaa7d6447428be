"""Solenoidal / potential splitting of grid tensor fields.

``f = f_s + dv`` with ``v = 0`` on a boundary layer is computed as the
L²(g)-orthogonal projection of ``f`` onto the range of the discrete ``d``
restricted to interior unknowns: CG on ``Dᵀ W D v = Dᵀ W f``.  The discrete
divergence reported for ``f_s`` is the one adjoint to that ``D``,
``δ_h = -W⁻¹ Dᵀ W``, for which the normal equations say exactly
``δ_h f_s = 0``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.ndimage import distance_transform_edt

from .fields import SymTensorField
from .geometry import MetricSpec
from .gridops import d_matrix, weight_matrix
from .symtensor import n_components
from .transforms import inner_derivative

logger = logging.getLogger(__name__)

__all__ = [
    "SolverError",
    "Decomposition",
    "MultiDecomposition",
    "interior_nodes",
    "solenoidal_decompose",
    "multi_decompose",
    "weak_divergence",
    "compose_potentials",
]

BOUNDARY_LAYER = 1.5


class SolverError(RuntimeError):
    """An iterative solve failed to reach its tolerance."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


def interior_nodes(f: SymTensorField, layer: float = BOUNDARY_LAYER) -> np.ndarray:
    """Masked nodes at distance >= ``layer`` cells from every unmasked node."""
    return distance_transform_edt(f.mask) >= layer


def _restrict(mask: np.ndarray, k: int) -> sp.csr_matrix:
    """Columns selecting the unknowns of the masked nodes (``P`` with ``x = P y``)."""
    nodes = np.flatnonzero(mask.ravel())
    cols = np.arange(nodes.size * k)
    rows = (nodes[:, None] * k + np.arange(k)[None, :]).ravel()
    return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(mask.size * k, nodes.size * k))


@dataclass
class _System:
    d: sp.csr_matrix  # full-grid d, (N² K_m, N² K_{m-1})
    w_out: sp.csr_matrix
    w_in: sp.csr_matrix
    p: sp.csr_matrix  # interior restriction
    dp: sp.csr_matrix
    normal: sp.csr_matrix


_SYSTEM_CACHE: dict = {}


def _system(grid, g: MetricSpec, order: int, interior: np.ndarray) -> _System:
    key = (grid, id(g), order, interior.tobytes())
    hit = _SYSTEM_CACHE.get(key)
    if hit is not None and hit[0] is g:
        return hit[1]
    d = d_matrix(grid, g, order - 1)
    w_out = weight_matrix(grid, g, order)
    w_in = weight_matrix(grid, g, order - 1)
    p = _restrict(interior, n_components(2, order - 1))
    dp = (d @ p).tocsr()
    normal = (dp.T @ w_out @ dp).tocsr()
    sys_ = _System(d, w_out, w_in, p, dp, normal)
    if len(_SYSTEM_CACHE) > 8:
        _SYSTEM_CACHE.clear()
    _SYSTEM_CACHE[key] = (g, sys_)
    return sys_


@dataclass
class Decomposition:
    """``f = f_s + dv``; residuals are absolute discrete L²(g) norms."""

    f_s: SymTensorField
    v: SymTensorField
    div_residual: float
    reassembly_residual: float
    iterations: int = 0
    cg_residuals: list = field(default_factory=list, repr=False)

    @property
    def residuals(self) -> tuple[float, float]:
        return self.div_residual, self.reassembly_residual


def _norm_w(x: np.ndarray, w: sp.csr_matrix) -> float:
    return float(np.sqrt(max(x @ (w @ x), 0.0)))


def weak_divergence(f: SymTensorField, g: MetricSpec, interior: np.ndarray | None = None) -> SymTensorField:
    """``δ_h f = -W⁻¹ Dᵀ W f`` on interior nodes (zero elsewhere)."""
    if interior is None:
        interior = interior_nodes(f)
    sys_ = _system(f.grid, g, f.order, interior)
    rhs = sys_.p.T @ (sys_.d.T @ (sys_.w_out @ f.values.ravel()))
    w_int = (sys_.p.T @ sys_.w_in @ sys_.p).tocsc()
    y = -spla.spsolve(w_int, rhs) if rhs.size else rhs
    vals = (sys_.p @ y).reshape(f.grid.shape + (-1,))
    return SymTensorField(f.order - 1, f.grid, vals, interior, f.dim)


def solenoidal_decompose(
    f: SymTensorField,
    g: MetricSpec,
    rtol: float = 1e-8,
    max_iter: int | None = None,
    interior: np.ndarray | None = None,
) -> Decomposition:
    """Split ``f`` into a discretely solenoidal part and ``dv`` with ``v = 0``
    on the boundary layer."""
    if f.order < 1:
        raise ValueError("decomposition needs a field of order >= 1")
    if interior is None:
        interior = interior_nodes(f)
    grid = f.grid
    sys_ = _system(grid, g, f.order, interior)
    fv = f.values.ravel()
    rhs = sys_.dp.T @ (sys_.w_out @ fv)
    k_in = n_components(2, f.order - 1)
    if max_iter is None:
        max_iter = 10 * grid.n**2
    history: list[float] = []
    bnorm = float(np.linalg.norm(rhs))
    if bnorm == 0.0:
        y = np.zeros(sys_.normal.shape[0])
        iters = 0
    else:
        diag = sys_.normal.diagonal()
        precond = sp.diags(np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0))

        def callback(xk):
            history.append(float(np.linalg.norm(rhs - sys_.normal @ xk)) / bnorm)

        y, info = spla.cg(sys_.normal, rhs, rtol=rtol, maxiter=max_iter, M=precond, callback=callback)
        iters = len(history)
        achieved = float(np.linalg.norm(rhs - sys_.normal @ y)) / bnorm
        if info != 0 and achieved > rtol:
            raise SolverError(
                f"CG stopped after {iters} iterations at relative residual {achieved:.3e} (target {rtol:.1e})",
                achieved,
            )
    v_vals = (sys_.p @ y).reshape(grid.shape + (k_in,))
    v = SymTensorField(f.order - 1, grid, v_vals, f.mask, f.dim)
    dv = (sys_.dp @ y)
    fs_vals = fv - dv
    f_s = SymTensorField(f.order, grid, fs_vals.reshape(f.values.shape), f.mask, f.dim)
    # discrete divergence of f_s in the adjoint-consistent sense
    wdiv = sys_.dp.T @ (sys_.w_out @ f_s.values.ravel())
    w_int = sys_.p.T @ sys_.w_in @ sys_.p
    div_res = float(np.sqrt(max(wdiv @ spla.spsolve(w_int.tocsc(), wdiv), 0.0))) if wdiv.size else 0.0
    reassembly = _norm_w(f_s.values.ravel() + dv - fv, sys_.w_out)
    return Decomposition(f_s, v, div_res, reassembly, iters, history)


@dataclass
class MultiDecomposition:
    """``f = Σ_i d^i v_i`` with ``v_i`` of order ``m - i``."""

    parts: list
    stages: list = field(repr=False)
    boundary_residuals: list = field(default_factory=list)


def compose_potentials(parts, g: MetricSpec) -> SymTensorField:
    """``Σ_i d^i parts[i]`` (grid inner derivatives)."""
    total = None
    for i, p in enumerate(parts):
        term = p
        for _ in range(i):
            term = inner_derivative(term, g)
        total = term if total is None else total + term
    return total


def multi_decompose(f: SymTensorField, g: MetricSpec, rtol: float = 1e-8) -> MultiDecomposition:
    """Iterated splitting ``f = v_0 + d w_1``, ``w_1 = v_1 + d w_2``, ...,
    ending with the scalar ``v_m = w_m``."""
    m = f.order
    interior = interior_nodes(f)
    parts, stages = [], []
    current = f
    for _ in range(m):
        dec = solenoidal_decompose(current, g, rtol=rtol, interior=interior)
        stages.append(dec)
        parts.append(dec.f_s)
        current = dec.v
    parts.append(current)
    return MultiDecomposition(parts, stages, _boundary_report(parts, g, interior))


def _boundary_report(parts, g: MetricSpec, interior: np.ndarray) -> list[float]:
    """Max of ``|Σ_{j<=i} d^j v_{m-i+j}|`` on the boundary layer, ``i = 0..m-1``."""
    m = len(parts) - 1
    layer = parts[0].mask & ~interior
    out = []
    for i in range(m):
        total = None
        for j in range(i + 1):
            term = parts[m - i + j]
            for _ in range(j):
                term = inner_derivative(term, g)
            total = term if total is None else total + term
        out.append(float(np.abs(total.values[layer]).max()) if layer.any() else 0.0)
    return out
