"""Symmetric m-tensors stored by their sorted multi-indices.

A symmetric tensor of order ``m`` in ``n`` dimensions has ``C(n+m-1, m)``
independent components, one per nondecreasing multi-index.  Components are
kept in lexicographic order of those multi-indices; every routine below
works on arrays whose *last* axis is that packed component axis, so the
same code serves single tensors and whole grids of them.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb, factorial

import numpy as np

__all__ = [
    "Packing",
    "packing",
    "n_components",
    "pack_index",
    "component_labels",
    "SymTensor",
    "symmetrize",
    "to_dense",
    "contract_full",
    "contract_partial",
    "sym_product",
    "sym_power",
    "raise_all",
    "lower_all",
    "metric_gram",
]


def n_components(dim: int, order: int) -> int:
    return comb(dim + order - 1, order)


class Packing:
    """Index bookkeeping for symmetric tensors of a given (dim, order)."""

    def __init__(self, dim: int, order: int):
        if dim < 1 or order < 0:
            raise ValueError(f"invalid (dim, order) = ({dim}, {order})")
        self.dim = dim
        self.order = order
        self.indices = list(itertools.combinations_with_replacement(range(dim), order))
        self.size = len(self.indices)
        self.rank = {idx: r for r, idx in enumerate(self.indices)}

        n_dense = dim**order
        dense_rank = np.empty(n_dense, dtype=np.intp)
        for t, tup in enumerate(itertools.product(range(dim), repeat=order)):
            dense_rank[t] = self.rank[tuple(sorted(tup))]
        self.dense_rank = dense_rank

        counts = np.bincount(dense_rank, minlength=self.size)
        # multinomial multiplicity of each sorted index
        self.multiplicity = counts.astype(float)

        self.expand = np.zeros((self.size, n_dense))
        self.expand[dense_rank, np.arange(n_dense)] = 1.0
        self.average = self.expand.T / counts[None, :]

        self.exponents = np.zeros((self.size, dim), dtype=int)
        for r, idx in enumerate(self.indices):
            for i in idx:
                self.exponents[r, i] += 1

    def dense_shape(self) -> tuple[int, ...]:
        return (self.dim,) * self.order


@lru_cache(maxsize=None)
def packing(dim: int, order: int) -> Packing:
    return Packing(dim, order)


def pack_index(multi_index, dim: int) -> int:
    """Linear slot of a (1-based) multi-index; permutations share a slot.

    >>> pack_index((2, 1), 2)
    1
    """
    idx = tuple(int(i) for i in multi_index)
    for i in idx:
        if not 1 <= i <= dim:
            raise ValueError(f"axis index {i} out of range [1, {dim}]")
    return packing(dim, len(idx)).rank[tuple(sorted(i - 1 for i in idx))]


def component_labels(dim: int, order: int) -> list[str]:
    """Column labels ``c_<sorted 1-based multi-index>`` used in field files."""
    return ["c_" + "".join(str(i + 1) for i in idx) for idx in packing(dim, order).indices]


def _check_last_axis(comps: np.ndarray, pk: Packing) -> None:
    if comps.shape[-1] != pk.size:
        raise ValueError(
            f"expected {pk.size} packed components for dim={pk.dim}, order={pk.order}, "
            f"got {comps.shape[-1]}"
        )


def symmetrize(dense) -> "SymTensor":
    """Average a full ``n x ... x n`` index table over permutations."""
    return SymTensor.from_dense(dense)


def symmetrize_dense(dense: np.ndarray, dim: int, order: int) -> np.ndarray:
    """Same as :func:`symmetrize` with explicit order; trailing axes are tensor axes."""
    pk = packing(dim, order)
    batch = dense.shape[: dense.ndim - order]
    if dense.shape[dense.ndim - order :] != pk.dense_shape():
        raise ValueError(f"dense table has shape {dense.shape}, expected trailing {pk.dense_shape()}")
    return dense.reshape(batch + (dim**order,)) @ pk.average


def to_dense(comps: np.ndarray, dim: int, order: int) -> np.ndarray:
    pk = packing(dim, order)
    comps = np.asarray(comps, dtype=float)
    _check_last_axis(comps, pk)
    return (comps @ pk.expand).reshape(comps.shape[:-1] + pk.dense_shape())


def _monomials(xi: np.ndarray, pk: Packing) -> np.ndarray:
    """``prod_k xi[k] ** exponent[I, k]`` for every packed index ``I``."""
    out = None
    for k in range(pk.dim):
        col = xi[..., k]
        pw = np.empty(col.shape + (pk.order + 1,))
        pw[..., 0] = 1.0
        for e in range(1, pk.order + 1):
            pw[..., e] = pw[..., e - 1] * col
        term = pw[..., pk.exponents[:, k]]
        out = term if out is None else out * term
    return out


def contract_full(comps, xi, dim: int | None = None, order: int | None = None) -> np.ndarray:
    """``f_{i1..im} xi^i1 ... xi^im`` with multinomial multiplicities.

    ``comps`` (..., K) and ``xi`` (..., n) broadcast against each other.
    """
    comps = np.asarray(comps, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if dim is None:
        dim = xi.shape[-1]
    if xi.shape[-1] != dim:
        raise ValueError(f"direction has dimension {xi.shape[-1]}, expected {dim}")
    if order is None:
        order = _order_from_size(comps.shape[-1], dim)
    pk = packing(dim, order)
    _check_last_axis(comps, pk)
    return np.sum(comps * pk.multiplicity * _monomials(xi, pk), axis=-1)


def contract_partial(comps, xi, dim: int, order: int) -> np.ndarray:
    """Contract the last index once against ``xi``: returns order-1 packed comps."""
    if order < 1:
        raise ValueError("cannot contract an order-0 tensor")
    dense = to_dense(comps, dim, order)
    xi = np.asarray(xi, dtype=float)
    red = np.einsum("...i,...i->...", dense, xi[(...,) + (None,) * (order - 1) + (slice(None),)])
    return symmetrize_dense(red, dim, order - 1)


def _order_from_size(size: int, dim: int) -> int:
    m = 0
    while n_components(dim, m) < size:
        m += 1
    if n_components(dim, m) != size:
        raise ValueError(f"{size} components do not match any order in dim {dim}")
    return m


def sym_product(a, b, dim: int, order_a: int, order_b: int) -> np.ndarray:
    """Symmetrized tensor product of packed ``a`` (order p) and ``b`` (order q)."""
    da = to_dense(a, dim, order_a)
    db = to_dense(b, dim, order_b)
    outer = da.reshape(da.shape + (1,) * order_b) * db.reshape(
        db.shape[: db.ndim - order_b] + (1,) * order_a + db.shape[db.ndim - order_b :]
    )
    return symmetrize_dense(outer, dim, order_a + order_b)


def sym_power(theta, order: int) -> np.ndarray:
    """Packed components of ``theta ⊙ ... ⊙ theta`` (``order`` factors)."""
    theta = np.asarray(theta, dtype=float)
    pk = packing(theta.shape[-1], order)
    return _monomials(theta, pk)


def _transform_all(comps, mat, dim: int, order: int) -> np.ndarray:
    dense = to_dense(comps, dim, order)
    letters = "abcdefgh"
    for axis in range(order):
        sub = list(letters[:order])
        sub_out = sub.copy()
        sub_out[axis] = "z"
        spec = f"...{''.join(sub)},...z{sub[axis]}->...{''.join(sub_out)}"
        dense = np.einsum(spec, dense, mat)
    return symmetrize_dense(dense, dim, order)


def _check_spd(g: np.ndarray) -> None:
    if not np.allclose(g, np.swapaxes(g, -1, -2), rtol=1e-12, atol=1e-14):
        raise np.linalg.LinAlgError("metric is not symmetric")
    eig = np.linalg.eigvalsh(g)
    if np.any(eig <= 0):
        raise np.linalg.LinAlgError("metric is not positive definite")


def raise_all(comps, g, order: int) -> np.ndarray:
    """``f^{i1..im} = f_{j1..jm} g^{i1 j1} ... g^{im jm}``."""
    g = np.asarray(g, dtype=float)
    _check_spd(g)
    return _transform_all(comps, np.linalg.inv(g), g.shape[-1], order)


def lower_all(comps, g, order: int) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    _check_spd(g)
    return _transform_all(comps, g, g.shape[-1], order)


def metric_gram(ginv: np.ndarray, order: int) -> np.ndarray:
    """Matrix ``M`` with ``<a, b>_g = a @ M @ b`` for packed a, b of this order.

    ``ginv`` has shape (..., n, n) (inverse metric); result (..., K, K).
    """
    dim = ginv.shape[-1]
    pk = packing(dim, order)
    batch = ginv.shape[:-2]
    full = np.ones(batch + (1, 1))
    for _ in range(order):
        # Kronecker-accumulate the inverse metric over tensor slots
        full = (full[..., :, None, :, None] * ginv[..., None, :, None, :]).reshape(
            batch + (full.shape[-2] * dim, full.shape[-1] * dim)
        )
    return pk.expand @ full @ pk.expand.T


@dataclass(frozen=True)
class SymTensor:
    """A single symmetric tensor with packed components."""

    order: int
    dim: int
    comps: np.ndarray = field(repr=False)

    def __post_init__(self):
        comps = np.array(self.comps, dtype=float).reshape(-1)
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.order < 0:
            raise ValueError("order must be non-negative")
        expected = n_components(self.dim, self.order)
        if comps.size != expected:
            raise ValueError(f"expected {expected} components, got {comps.size}")
        comps.setflags(write=False)
        object.__setattr__(self, "comps", comps)

    @classmethod
    def zeros(cls, order: int, dim: int = 2) -> "SymTensor":
        return cls(order, dim, np.zeros(n_components(dim, order)))

    @classmethod
    def from_dense(cls, dense) -> "SymTensor":
        dense = np.asarray(dense, dtype=float)
        order = dense.ndim
        dim = dense.shape[0] if order else 1
        if any(s != dim for s in dense.shape):
            raise ValueError(f"dense table must be n x ... x n, got shape {dense.shape}")
        return cls(order, dim, symmetrize_dense(dense, dim, order))

    def __getitem__(self, multi_index) -> float:
        if not isinstance(multi_index, tuple):
            multi_index = (multi_index,)
        if len(multi_index) != self.order:
            raise IndexError(f"need {self.order} indices")
        return float(self.comps[pack_index(multi_index, self.dim)])

    def to_dense(self) -> np.ndarray:
        return to_dense(self.comps, self.dim, self.order)

    def contract(self, xi) -> float:
        return float(contract_full(self.comps, xi, self.dim, self.order))

    def __mul__(self, other: "SymTensor") -> "SymTensor":
        if not isinstance(other, SymTensor):
            return NotImplemented
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        comps = sym_product(self.comps, other.comps, self.dim, self.order, other.order)
        return SymTensor(self.order + other.order, self.dim, comps)

    def raised(self, g) -> "SymTensor":
        return SymTensor(self.order, self.dim, raise_all(self.comps, g, self.order))

    def lowered(self, g) -> "SymTensor":
        return SymTensor(self.order, self.dim, lower_all(self.comps, g, self.order))


def multinomial(counts) -> int:
    total = factorial(sum(counts))
    for c in counts:
        total //= factorial(c)
    return total
