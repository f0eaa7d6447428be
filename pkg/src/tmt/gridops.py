"""Sparse matrices of the grid operators ``d``, ``δ`` and the L²(g) weight.

Unknown vectors are grid field values flattened in C order, i.e. index
``node * K + component`` with ``node = i * N + j``.  ``d_matrix`` reproduces
:func:`tmt.transforms.inner_derivative` on grid fields exactly (before the
output mask is applied), and likewise ``delta_matrix`` for ``divergence``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .fields import Grid
from .geometry import MetricSpec
from .symtensor import metric_gram, n_components
from .transforms import _pointwise_d, _pointwise_delta

__all__ = ["gradient_1d", "d_matrix", "delta_matrix", "weight_matrix", "node_block_diag"]


@lru_cache(maxsize=16)
def gradient_1d(n: int, spacing: float) -> sp.csr_matrix:
    """Matrix of ``np.gradient`` along one axis (one-sided at the ends)."""
    rows, cols, vals = [], [], []
    for i in range(n):
        if i == 0:
            lo, hi, den = 0, 1, spacing
        elif i == n - 1:
            lo, hi, den = n - 2, n - 1, spacing
        else:
            lo, hi, den = i - 1, i + 1, 2 * spacing
        rows += [i, i]
        cols += [lo, hi]
        vals += [-1.0 / den, 1.0 / den]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _axis_partials(grid: Grid):
    g1 = gradient_1d(grid.n, grid.spacing)
    eye = sp.identity(grid.n, format="csr")
    return sp.kron(g1, eye, format="csr"), sp.kron(eye, g1, format="csr")


def node_block_diag(blocks: np.ndarray) -> sp.csr_matrix:
    """Block-diagonal matrix from per-node blocks ``(nodes, K_out, K_in)``."""
    nodes, ko, ki = blocks.shape
    r = (np.arange(nodes)[:, None, None] * ko + np.arange(ko)[None, :, None]) + 0 * blocks.astype(np.intp)
    c = (np.arange(nodes)[:, None, None] * ki + np.arange(ki)[None, None, :]) + 0 * blocks.astype(np.intp)
    return sp.csr_matrix((blocks.ravel(), (r.ravel(), c.ravel())), shape=(nodes * ko, nodes * ki))


def _unit_partials(k: int, axis: int) -> np.ndarray:
    part = np.zeros((k, 2, k))
    part[np.arange(k), axis, np.arange(k)] = 1.0
    return part


def d_matrix(grid: Grid, g: MetricSpec, order: int) -> sp.csr_matrix:
    """``d`` from order ``order`` to ``order + 1`` on the full grid."""
    ki, ko = n_components(2, order), n_components(2, order + 1)
    pts = grid.points().reshape(-1, 2)
    p1, p2 = _axis_partials(grid)
    zeros = np.zeros((ki, ki))
    mats = []
    for axis, pa in enumerate((p1, p2)):
        coef = _pointwise_d(zeros, _unit_partials(ki, axis), np.zeros((ki, 2, 2, 2)), order)
        mats.append(sp.kron(pa, sp.csr_matrix(coef.T), format="csr"))
    out = mats[0] + mats[1]
    if order > 0 and g.kind != "euclidean":
        gam = g.christoffel(pts)[:, None]
        blocks = _pointwise_d(np.eye(ki)[None], np.zeros((1, ki, 2, ki)), gam, order)
        out = out + node_block_diag(np.swapaxes(blocks, 1, 2))
    return out.tocsr()


def delta_matrix(grid: Grid, g: MetricSpec, order: int) -> sp.csr_matrix:
    """``δ`` from order ``order`` to ``order - 1`` on the full grid."""
    if order < 1:
        raise ValueError("divergence needs order >= 1")
    ki, ko = n_components(2, order), n_components(2, order - 1)
    pts = grid.points().reshape(-1, 2)
    ginv = g.inverse(pts)[:, None]
    gam = g.christoffel(pts)[:, None]
    p1, p2 = _axis_partials(grid)
    eye_k = sp.identity(ki, format="csr")
    zeros = np.zeros((1, ki, ki))
    out = None
    for axis, pa in enumerate((p1, p2)):
        coef = _pointwise_delta(zeros, _unit_partials(ki, axis)[None], np.zeros((1, 1, 2, 2, 2)), ginv, order)
        term = node_block_diag(np.swapaxes(coef, 1, 2)) @ sp.kron(pa, eye_k, format="csr")
        out = term if out is None else out + term
    if g.kind != "euclidean":
        blocks = _pointwise_delta(np.eye(ki)[None], np.zeros((1, ki, 2, ki)), gam, ginv, order)
        out = out + node_block_diag(np.swapaxes(blocks, 1, 2))
    return out.tocsr()


def weight_matrix(grid: Grid, g: MetricSpec, order: int) -> sp.csr_matrix:
    """Nodal L²(g) weight: ``h² √det g`` times the packed Gram matrix."""
    pts = grid.points().reshape(-1, 2)
    gram = metric_gram(g.inverse(pts), order)
    vol = g.sqrt_det(pts) * grid.spacing**2
    return node_block_diag(gram * vol[:, None, None])
