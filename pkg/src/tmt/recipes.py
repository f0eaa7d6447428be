"""Named analytic test fields.

Every recipe returns a :class:`~tmt.fields.FunctionField`; most also carry
exact coordinate derivatives so ``d`` and ``δ`` of them avoid finite
differences.
"""
from __future__ import annotations

import numpy as np

from .fields import FunctionField, as_points
from .symtensor import n_components

__all__ = [
    "constant",
    "polynomial_potential",
    "random_potential",
    "gaussian_bump",
    "compact_bump",
    "curl_field",
    "airy_field",
    "build_recipe",
    "RECIPES",
]


def _monomial_exponents(degree: int) -> np.ndarray:
    return np.array([(a, d - a) for d in range(degree + 1) for a in range(d, -1, -1)])


def _powers(z: np.ndarray, top: int) -> np.ndarray:
    out = np.empty(z.shape + (top + 1,))
    out[..., 0] = 1.0
    for k in range(1, top + 1):
        out[..., k] = out[..., k - 1] * z
    return out


def _monomials(pts: np.ndarray, exps: np.ndarray):
    """Values and first derivatives of ``x^a y^b`` for each exponent row."""
    a, b = exps[:, 0], exps[:, 1]
    top = int(exps.max()) if exps.size else 0
    px = _powers(pts[..., 0], top)
    py = _powers(pts[..., 1], top)
    xa, yb = px[..., a], py[..., b]
    val = xa * yb
    dx = a * px[..., np.maximum(a - 1, 0)] * yb
    dy = xa * b * py[..., np.maximum(b - 1, 0)]
    return val, dx, dy


def constant(order: int, value=1.0, radius: float = 1.0) -> FunctionField:
    """The field with every packed component equal to ``value`` (or a given vector)."""
    k = n_components(2, order)
    comps = np.broadcast_to(np.asarray(value, dtype=float), (k,)).copy()

    def func(p):
        return np.broadcast_to(comps, as_points(p).shape[:-1] + (k,))

    def parts(p):
        return np.zeros(as_points(p).shape[:-1] + (2, k))

    return FunctionField(order, func, radius, 2, f"const{order}", parts)


def polynomial_potential(
    order: int, coeffs: np.ndarray, power: int = 2, radius: float = 1.0, degree: int | None = None
) -> FunctionField:
    """``(1 - |x|²/R²)^power · P(x)`` with packed polynomial components.

    ``coeffs`` has shape ``(n_monomials, K)`` over monomials ``x^a y^b`` of
    total degree ``<= degree`` (ordered by degree, then decreasing ``a``).
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if degree is None:
        degree = 0
        while len(_monomial_exponents(degree)) < coeffs.shape[0]:
            degree += 1
    exps = _monomial_exponents(degree)
    if coeffs.shape != (len(exps), n_components(2, order)):
        raise ValueError(f"coeffs shape {coeffs.shape} does not match degree {degree}, order {order}")
    r2scale = 1.0 / radius**2

    def func(p):
        p = as_points(p)
        s = 1.0 - r2scale * np.sum(p**2, axis=-1, keepdims=True)
        val, _, _ = _monomials(p, exps)
        return s**power * (val @ coeffs)

    def parts(p):
        p = as_points(p)
        s = 1.0 - r2scale * np.sum(p**2, axis=-1, keepdims=True)
        val, dx, dy = _monomials(p, exps)
        poly = val @ coeffs
        ds = power * s ** (power - 1) if power > 0 else np.zeros_like(s)
        gx = ds * (-2.0 * r2scale * p[..., 0:1]) * poly + s**power * (dx @ coeffs)
        gy = ds * (-2.0 * r2scale * p[..., 1:2]) * poly + s**power * (dy @ coeffs)
        return np.stack([gx, gy], axis=-2)

    return FunctionField(order, func, radius, 2, f"poly{order}", parts)


def random_potential(order: int, rng: np.random.Generator, degree: int = 3, power: int = 2, radius: float = 1.0):
    """Random smooth field vanishing to order ``power`` on the circle."""
    n_mon = len(_monomial_exponents(degree))
    coeffs = rng.normal(size=(n_mon, n_components(2, order)))
    return polynomial_potential(order, coeffs, power, radius, degree)


def gaussian_bump(
    center=(0.0, 0.0), width: float = 0.25, amplitude: float = 1.0, order: int = 0, radius: float = 1.0, comps=None
) -> FunctionField:
    """``A exp(-|x - c|² / (2 w²))`` times fixed packed components (default all ones)."""
    c = np.asarray(center, dtype=float)
    k = n_components(2, order)
    base = np.ones(k) if comps is None else np.asarray(comps, dtype=float)

    def func(p):
        p = as_points(p)
        r2 = np.sum((p - c) ** 2, axis=-1, keepdims=True)
        return amplitude * np.exp(-0.5 * r2 / width**2) * base

    def parts(p):
        p = as_points(p)
        val = func(p)
        return -((p - c) / width**2)[..., :, None] * val[..., None, :]

    return FunctionField(order, func, radius, 2, "gauss", parts)


def compact_bump(
    center=(0.0, 0.0), support: float = 0.25, amplitude: float = 1.0, order: int = 0, radius: float = 1.0, comps=None
) -> FunctionField:
    """Smooth bump ``A exp(1 - 1/(1 - s²))``, ``s = |x - c|/support``; exactly 0 for ``s >= 1``."""
    c = np.asarray(center, dtype=float)
    k = n_components(2, order)
    base = np.ones(k) if comps is None else np.asarray(comps, dtype=float)

    def profile(p):
        s2 = np.sum((p - c) ** 2, axis=-1, keepdims=True) / support**2
        inside = s2 < 1.0
        den = np.where(inside, 1.0 - s2, 1.0)
        return np.where(inside, np.exp(1.0 - 1.0 / den), 0.0), den, inside

    def func(p):
        prof, _, _ = profile(as_points(p))
        return amplitude * prof * base

    def parts(p):
        p = as_points(p)
        prof, den, inside = profile(p)
        # d/dx exp(1 - 1/(1-s²)) = -prof * 2 (x-c)/support² / (1-s²)²
        fac = np.where(inside, -2.0 * prof / den**2 / support**2, 0.0)
        grad = fac * (p - c)
        return amplitude * grad[..., :, None] * base

    return FunctionField(order, func, radius, 2, "bump", parts)


def curl_field(
    coeffs=None, power: int = 4, radius: float = 1.0, degree: int = 2, rng: np.random.Generator | None = None
) -> FunctionField:
    """Divergence-free (Euclidean) vector field ``(∂₂ψ, -∂₁ψ)``.

    ``ψ = (1 - |x|²/R²)^power · P(x)``; ``P`` from ``coeffs`` (or random).
    """
    exps = _monomial_exponents(degree)
    if coeffs is None:
        rng = np.random.default_rng(0) if rng is None else rng
        coeffs = rng.normal(size=len(exps))
    psi = polynomial_potential(0, np.asarray(coeffs, dtype=float)[:, None], power, radius, degree)

    def func(p):
        gr = psi.partials(p)[..., 0]
        return np.stack([gr[..., 1], -gr[..., 0]], axis=-1)

    return FunctionField(1, func, radius, 2, "curl")


def airy_field(coeffs=None, power: int = 5, radius: float = 1.0, degree: int = 2, rng=None, step: float = 1e-3):
    """Euclidean-solenoidal symmetric 2-tensor from a stress function ψ.

    ``f_11 = ∂₂²ψ``, ``f_12 = -∂₁∂₂ψ``, ``f_22 = ∂₁²ψ`` (second derivatives
    by 4th-order differences of the exact gradient).
    """
    exps = _monomial_exponents(degree)
    if coeffs is None:
        rng = np.random.default_rng(0) if rng is None else rng
        coeffs = rng.normal(size=len(exps))
    psi = polynomial_potential(0, np.asarray(coeffs, dtype=float)[:, None], power, radius, degree)
    offs = np.array([-2.0, -1.0, 1.0, 2.0]) * step
    coef = np.array([1.0, -8.0, 8.0, -1.0]) / (12.0 * step)

    def func(p):
        p = as_points(p)
        hess = np.zeros(p.shape[:-1] + (2, 2))
        for a in range(2):
            e = np.zeros(2)
            e[a] = 1.0
            grads = np.stack([psi.partials(p + o * e)[..., 0] for o in offs], axis=-1)
            hess[..., a, :] = grads @ coef
        return np.stack([hess[..., 1, 1], -hess[..., 0, 1], hess[..., 0, 0]], axis=-1)

    return FunctionField(2, func, radius, 2, "airy")


RECIPES = {
    "constant": constant,
    "gaussian": gaussian_bump,
    "bump": compact_bump,
    "random_potential": random_potential,
    "curl": curl_field,
    "airy": airy_field,
}


def build_recipe(name: str, order: int, params: dict, rng: np.random.Generator, radius: float = 1.0):
    """Instantiate a named recipe for tensor order ``order``."""
    params = dict(params)
    if name == "constant":
        return constant(order, params.get("value", 1.0), radius)
    if name == "gaussian":
        return gaussian_bump(order=order, radius=radius, **params)
    if name == "bump":
        return compact_bump(order=order, radius=radius, **params)
    if name == "random_potential":
        return random_potential(order, rng, radius=radius, **params)
    if name == "curl":
        if order != 1:
            raise ValueError("the curl recipe has tensor order 1")
        return curl_field(radius=radius, rng=rng, **params)
    if name == "airy":
        if order != 2:
            raise ValueError("the airy recipe has tensor order 2")
        return airy_field(radius=radius, rng=rng, **params)
    raise ValueError(f"unknown field recipe {name!r}")
