import itertools

import numpy as np
import pytest

from tmt.geometry import DomainSpec, MetricSpec
from tmt.recipes import random_potential
from tmt.symtensor import pack_index
from tmt.transforms import v_from_ray_primitive
from tmt.tube_cascade import (
    ChartFoldError,
    _transform,
    build_chart,
    cascade_solve,
    chart_inner_derivative,
    diff4,
    dv_normal_expansion,
)

EXT = DomainSpec(1.0).extended()


def _start(g, angle=np.pi, tilt=0.05):
    x0 = EXT.boundary_point(np.array([angle]))[0]
    nu = EXT.normal(g, x0[None])[0]
    tau = EXT.tangent(g, x0[None])[0]
    return x0, -np.cos(tilt) * nu + np.sin(tilt) * tau


@pytest.fixture(scope="module")
def chart_e():
    g = MetricSpec.euclidean()
    return g, build_chart(g, EXT, _start(g, tilt=0.0))


@pytest.fixture(scope="module")
def chart_c():
    g = MetricSpec.conformal("0.1*(x1^2 + x2^2)")
    return g, build_chart(g, EXT, _start(g))


def _random_chart_field(chart, order, rng, n_modes=4):
    """Smooth random packed components built from low-frequency modes in chart coordinates."""
    xp, xn = np.meshgrid(chart.xp, chart.xn, indexing="ij")
    s = (xp - chart.xp[0]) / (chart.xp[-1] - chart.xp[0])
    t = xn / chart.xn[-1]
    out = np.zeros(chart.shape + (order + 1,))
    for c in range(order + 1):
        for _ in range(n_modes):
            a, b = rng.integers(0, 3, size=2)
            ph = rng.uniform(0, 2 * np.pi, size=2)
            out[..., c] += rng.normal() * np.cos(np.pi * a * s + ph[0]) * np.cos(np.pi * b * t + ph[1])
    return out


def _normal_cols(order, k):
    m = order + 1
    return [pack_index([2] * (m - k) + [i + 1 for i in idx], 2) for idx in itertools.combinations_with_replacement(range(2), k)]


def test_diff4_exact_on_cubics():
    x = np.linspace(0, 1, 21)
    a = 2 * x**3 - x + 1
    d = diff4(a, x[1] - x[0], 0)
    np.testing.assert_allclose(d[2:-2], (6 * x**2 - 1)[2:-2], atol=1e-10)
    # second order at the edges: exact on quadratics
    q = x**2 - 3 * x
    np.testing.assert_allclose(diff4(q, x[1] - x[0], 0), 2 * x - 3, atol=1e-10)


def test_euclidean_chart_is_cartesian(chart_e):
    _, ch = chart_e
    inner = ch.interior()
    assert np.abs(ch.ghat - np.eye(2))[inner].max() <= 1e-10
    assert np.abs(ch.gamma_hat)[inner].max() <= 1e-6
    # straight strip: world = origin + xn e1 + xp e2 for the diameter
    np.testing.assert_allclose(ch.world[..., 1], np.broadcast_to(ch.xp[:, None], ch.shape), atol=1e-10)


def test_conformal_chart_invariants(chart_c):
    _, ch = chart_c
    assert ch.shape[1] == 401
    assert ch.metric_defect() <= 1e-4
    assert ch.christoffel_defect() <= 1e-3


def test_chart_lines_are_unit_speed(chart_c):
    g, ch = chart_c
    speed = g.norm(ch.world, ch.e_n)
    assert np.abs(speed - 1.0)[ch.interior()].max() <= 1e-4


@pytest.mark.parametrize("eps,retries", [(0.3, 0), (0.8, 0), (0.4, 2)])
def test_fold_on_focusing_metric(eps, retries):
    g = MetricSpec.conformal("-2*(x1^2 + x2^2)")
    with pytest.raises(ChartFoldError):
        build_chart(g, EXT, _start(g, tilt=0.0), eps=eps, retries=retries, resolutions=(41, 200))


def test_odd_resolution_rejected(chart_e):
    g, _ = chart_e
    with pytest.raises(ValueError):
        build_chart(g, EXT, _start(g), resolutions=(41, 401))


def test_cascade_zero_field(chart_c):
    _, ch = chart_c
    res = cascade_solve(np.zeros(ch.shape + (3,)), ch, order=2)
    assert np.all(res.v == 0.0) and np.all(res.h == 0.0)


def test_cascade_strip_order_one(chart_e, rng):
    _, ch = chart_e
    f = _random_chart_field(ch, 1, rng)
    res = cascade_solve(f, ch, order=1)
    # v = ∫ f_n dx^n by the trapezoid-free reference: cumulative Simpson on the fine grid
    from scipy.integrate import cumulative_simpson

    ref = cumulative_simpson(f[..., 1], dx=ch.dxn, axis=1, initial=0.0)
    np.testing.assert_allclose(res.v[..., 0], ref, atol=1e-7)
    assert np.abs(res.h[..., 1])[ch.interior()].max() <= 1e-8


@pytest.mark.parametrize("metric", ["chart_e", "chart_c"])
@pytest.mark.parametrize("order", [1, 2, 3])
def test_cascade_normal_residual(request, rng, metric, order):
    g, ch = request.getfixturevalue(metric)
    f = random_potential(order, rng, power=3)
    res = cascade_solve(f, ch)
    assert res.v[:, 0].max() == 0.0 and res.v[:, 0].min() == 0.0
    assert res.normal_residual <= 1e-3 * res.f_max


def test_cascade_initial_data_stability(chart_c, rng):
    g, ch = chart_c
    f = random_potential(2, rng, power=3)
    a = cascade_solve(f, ch)
    b = cascade_solve(f, ch, init=1e-8)
    assert np.abs(a.v - b.v).max() <= 1e-6


def test_expansion_k_out_of_range(chart_c):
    _, ch = chart_c
    with pytest.raises(ValueError):
        dv_normal_expansion(np.zeros(ch.shape + (2,)), ch, 3)


def test_expansion_k0_is_normal_derivative(chart_c, rng):
    _, ch = chart_c
    v = _random_chart_field(ch, 2, rng)
    exp = dv_normal_expansion(v, ch, 0)[..., 0]
    np.testing.assert_allclose(exp, diff4(v[..., 2], ch.dxn, 1), atol=1e-12)


@pytest.mark.parametrize("order", [0, 1, 2])
def test_expansion_flat_chart(chart_e, rng, order):
    _, ch = chart_e
    v = _random_chart_field(ch, order, rng)
    dv = chart_inner_derivative(v, ch, order)
    for k in range(order + 2):
        exp = dv_normal_expansion(v, ch, k, order)
        assert np.abs(exp - dv[..., _normal_cols(order, k)])[ch.interior()].max() <= 1e-10 * max(1.0, np.abs(dv).max())


def test_expansion_conformal_m3_k2(chart_c, rng):
    _, ch = chart_c
    v = _random_chart_field(ch, 2, rng)
    dv = chart_inner_derivative(v, ch, 2)
    exp = dv_normal_expansion(v, ch, 2, 2)
    ref = dv[..., _normal_cols(2, 2)]
    inner = ch.interior(3)
    assert np.abs(exp - ref)[inner].max() <= 1e-3 * np.abs(ref)[inner].max()


def test_cascade_matches_invariant_construction(chart_e):
    g, ch = chart_e
    f = random_potential(2, np.random.default_rng(11), power=3)
    res = cascade_solve(f, ch)
    nodes = [(20, 200), (10, 133), (30, 266)]
    x = np.array([ch.world[n] for n in nodes])
    en = np.array([ch.e_n[n] for n in nodes])
    jac = np.array([ch.jac[n] for n in nodes])
    vw = _transform(v_from_ray_primitive(f, g, EXT, x, en), jac, 1)
    vc = np.array([res.v[n] for n in nodes])
    assert np.abs(vw - vc).max() <= 1e-3 * np.abs(vc).max()
