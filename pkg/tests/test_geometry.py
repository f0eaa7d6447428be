import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse.csgraph import dijkstra

from conftest import conformal_christoffel
from tmt.geometry import (
    ConvexSet,
    DomainSpec,
    MetricSpec,
    ShootingError,
    TrappedGeodesicError,
    christoffel,
    geodesic_between,
    make_fan,
    simplicity_check,
    trace_geodesic,
)


def test_euclidean_christoffel_zero(euclid, rng):
    assert np.all(christoffel(euclid, rng.uniform(-1, 1, size=(10, 2))) == 0.0)


def test_conformal_christoffel_closed_form(conformal, rng):
    x = rng.uniform(-1, 1, size=(50, 2))
    np.testing.assert_allclose(christoffel(conformal, x), conformal_christoffel(x), atol=1e-6)


def test_christoffel_symmetric(rng):
    g = MetricSpec.from_callable(
        lambda x: np.stack(
            [
                np.stack([1 + 0.2 * x[..., 0] ** 2, 0.1 * x[..., 0] * x[..., 1]], -1),
                np.stack([0.1 * x[..., 0] * x[..., 1], 1 + 0.3 * np.sin(x[..., 1])], -1),
            ],
            -2,
        )
    )
    gam = christoffel(g, rng.uniform(-1, 1, size=(20, 2)))
    np.testing.assert_allclose(gam, np.swapaxes(gam, -1, -2), atol=1e-14)


def test_metric_spd_on_domain(conformal, rng):
    x = rng.uniform(-1.1, 1.1, size=(200, 2))
    assert np.all(np.linalg.eigvalsh(conformal.eval(x)) > 0)


def test_diameter_chord(euclid, dom):
    geo = trace_geodesic(euclid, dom, [-1.0, 0.0], [1.0, 0.0])
    assert geo.exit_param == pytest.approx(2.0, abs=1e-9)
    assert abs(float(dom.b(geo.positions[-1]))) <= 1e-9


@pytest.mark.parametrize("d", [0.0, 0.3, -0.55, 0.9])
def test_chord_at_distance(euclid, dom, d):
    # start on the circle at height d, heading along +x
    x0 = [-np.sqrt(1 - d * d), d]
    geo = trace_geodesic(euclid, dom, x0, [1.0, 0.0])
    assert geo.exit_param == pytest.approx(2 * np.sqrt(1 - d * d), abs=1e-9)
    assert np.abs(geo.positions[:, 1] - d).max() <= 1e-9


def test_outward_start_rejected(euclid, dom):
    with pytest.raises(ValueError):
        trace_geodesic(euclid, dom, [-1.0, 0.0], [-1.0, 0.0])


def test_conformal_exit_step_refinement(conformal, dom):
    x = np.array([-1.0, 0.0])
    xi = np.array([np.cos(0.3), np.sin(0.3)])
    xi /= conformal.norm(x, xi)
    ref = trace_geodesic(conformal, dom, x, xi, 1e-2 / 16).exit_param
    e1 = abs(trace_geodesic(conformal, dom, x, xi, 4e-2).exit_param - ref)
    e2 = abs(trace_geodesic(conformal, dom, x, xi, 2e-2).exit_param - ref)
    # fourth order up to the exit-bisection floor
    assert e1 < 1e-8 and e2 < e1 / 8


def test_speed_conserved(conformal, dom):
    fan = make_fan(conformal, dom, 16, 8, 1e-3)
    speed = conformal.norm(fan.positions, fan.velocities)
    assert np.abs(np.where(fan.valid, speed, 1.0) - 1.0).max() <= 1e-6


def test_trapped_geodesic(dom):
    # strongly focusing metric on a larger extension traps a tangential ray
    g = MetricSpec.conformal("-3*(x1^2 + x2^2)")
    with pytest.raises(TrappedGeodesicError):
        trace_geodesic(g, DomainSpec(1.0), [0.0, 0.999], [1.0, 0.0], 5e-2)


def test_fan_small(euclid, dom):
    fan = make_fan(euclid, dom, 4, 1)
    assert len(fan) == 4
    nu = dom.normal(euclid, fan.starts)
    assert np.all(np.einsum("bi,bi->b", fan.directions, nu) < 0)


def test_fan_midpoints_inside(euclid, dom):
    fan = make_fan(euclid, dom, 64, 32, 1e-2)
    mid = 0.5 * (fan.starts + np.array([g.positions[-1] for g in fan]))
    assert np.all(np.linalg.norm(mid, axis=1) < 1.0)


def test_fan_rejects_zero_count(euclid, dom):
    with pytest.raises(ValueError):
        make_fan(euclid, dom, 0, 3)


def test_avoiding_filter_matches_chord_distance(euclid, dom):
    from tmt.reconstruct import avoiding_mask

    fan = make_fan(euclid, dom, 64, 32, 5e-3)
    keep = avoiding_mask(fan, ConvexSet((0.0, 0.0), 0.3), euclid, 0.02)
    # chord distance from the centre is |cos(boundary) ... | = |sin α| for radius 1
    dist = np.abs(np.sin(fan.dir_angles))
    far = dist > 0.32 + 1e-3
    near = dist < 0.32 - 1e-3
    assert np.all(keep[far]) and not np.any(keep[near])


@pytest.mark.parametrize("lam,ok", [(None, True), ("0.1*(x1^2 + x2^2)", True), ("-2*(x1^2 + x2^2)", False)])
def test_simplicity(dom, lam, ok):
    g = MetricSpec.euclidean() if lam is None else MetricSpec.conformal(lam)
    rep = simplicity_check(g, dom)
    assert rep.passed == ok
    if not ok:
        assert rep.n_conjugate_failures > 0


def test_flat_jacobi_margin(euclid, dom):
    assert simplicity_check(euclid, dom).jacobi_margin == pytest.approx(1.0, abs=1e-12)


def test_geodesic_between_straight(euclid):
    seg = geodesic_between(euclid, [0.0, 0.0], [0.5, 0.0])
    assert seg.exit_param == pytest.approx(0.5, abs=1e-8)
    assert np.abs(seg.positions[:, 1]).max() < 1e-12


def test_geodesic_between_reversible(conformal):
    a, b = np.array([0.1, -0.3]), np.array([0.5, 0.4])
    fwd = geodesic_between(conformal, a, b)
    bwd = geodesic_between(conformal, b, a)
    assert fwd.exit_param == pytest.approx(bwd.exit_param, abs=1e-8)
    # compare at matching arc parameters t and L - t
    t = np.linspace(0, fwd.exit_param, 7)
    pf = np.stack([np.interp(t, fwd.t, fwd.positions[:, i]) for i in range(2)], -1)
    pb = np.stack([np.interp(fwd.exit_param - t, bwd.t, bwd.positions[:, i]) for i in range(2)], -1)
    np.testing.assert_allclose(pf, pb, atol=1e-6)


def test_geodesic_between_endpoint(conformal):
    seg = geodesic_between(conformal, [-0.6, 0.2], [0.7, -0.1])
    assert np.linalg.norm(seg.positions[-1] - [0.7, -0.1]) < 1e-8


def _dijkstra_midpoint(g, a, b, n=81):
    # 16-neighbour lattice graph on [-1, 1]², edge length by the midpoint metric
    ax = np.linspace(-1, 1, n)
    h = ax[1] - ax[0]
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    steps = [(1, 0), (0, 1), (1, 1), (1, -1), (2, 1), (1, 2), (2, -1), (1, -2)]
    rows, cols, wts = [], [], []
    for di, dj in steps:
        i2, j2 = ii + di, jj + dj
        ok = (i2 >= 0) & (i2 < n) & (j2 >= 0) & (j2 < n)
        p = np.stack([ax[ii[ok]], ax[jj[ok]]], -1)
        d = np.array([di, dj], float) * h
        w = g.norm(p + 0.5 * d, np.broadcast_to(d, p.shape))
        rows.append((ii[ok] * n + jj[ok]).ravel())
        cols.append((i2[ok] * n + j2[ok]).ravel())
        wts.append(w)
    graph = sp.csr_matrix((np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n))
    src = int(round((a[0] + 1) / h)) * n + int(round((a[1] + 1) / h))
    dst = int(round((b[0] + 1) / h)) * n + int(round((b[1] + 1) / h))
    dist, pred = dijkstra(graph, directed=False, indices=src, return_predecessors=True)
    path = [dst]
    while path[-1] != src:
        path.append(pred[path[-1]])
    pts = np.array([[ax[k // n], ax[k % n]] for k in path[::-1]])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0], np.cumsum(seg)])
    # Euclidean-arclength midpoint is not the metric midpoint; use metric arclength
    ms = np.concatenate([[0], np.cumsum(g.norm(0.5 * (pts[1:] + pts[:-1]), np.diff(pts, axis=0)))])
    half = 0.5 * ms[-1]
    return np.array([np.interp(half, ms, pts[:, i]) for i in range(2)]), h, s


def test_geodesic_between_dijkstra_midpoint():
    # a stronger conformal factor makes the geodesic visibly curved
    g = MetricSpec.conformal("0.5*(x1^2 + x2^2)")
    a, b = np.array([-0.75, 0.5]), np.array([0.75, 0.5])
    seg = geodesic_between(g, a, b)
    mid = np.array([np.interp(0.5 * seg.exit_param, seg.t, seg.positions[:, i]) for i in range(2)])
    ref, h, _ = _dijkstra_midpoint(g, a, b)
    assert np.linalg.norm(mid - (a + b) / 2) > 4 * h
    assert np.linalg.norm(mid - ref) <= 2 * h


def test_shooting_failure_reported():
    g = MetricSpec.euclidean()
    with pytest.raises(ShootingError):
        geodesic_between(g, [0.0, 0.0], [0.5, 0.0], tol=1e-30)


def test_convex_set_euclidean(euclid):
    ok, worst = ConvexSet((0.1, 0.0), 0.3).check_convex(euclid, n=16)
    assert ok and worst <= 1e-8


@settings(max_examples=15, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-1.4, 1.4))
def test_property_euclidean_chords_exact(phi, alpha):
    g, dom = MetricSpec.euclidean(), DomainSpec(1.0)
    x = dom.boundary_point(np.array([phi]))[0]
    nu = x
    tau = np.array([-x[1], x[0]])
    xi = -np.cos(alpha) * nu + np.sin(alpha) * tau
    geo = trace_geodesic(g, dom, x, xi, 1e-2)
    assert abs(geo.exit_param - 2 * np.cos(alpha)) <= 1e-9
    # samples stay on the chord line
    off = (geo.positions - x) @ np.array([-xi[1], xi[0]])
    assert np.abs(off).max() <= 1e-9
