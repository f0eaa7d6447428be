"""Experiment pipelines behind the ``tmt`` command.

Each experiment writes its CSV data, gnuplot scripts, ``report.csv``
(``name,value,threshold,pass``) and ``summary.txt`` into the output
directory and returns a :class:`RunReport`.  CSV contents depend only on
the configuration and seed; timings go to the summary only.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .config import ConvexConfig, ExperimentConfig
from .decomposition import compose_potentials, interior_nodes, multi_decompose, solenoidal_decompose
from .fields import FunctionField, Grid
from .geometry import make_fan, simplicity_check
from .recipes import build_recipe, curl_field, polynomial_potential, random_potential
from .reconstruct import _stencil_interior, cascade_reconstruct, support_experiment
from .symtensor import pack_index
from .transforms import (
    MomentSinogram,
    xi_derivative_check,
    divergence,
    generator_identity_check,
    inner_derivative,
    l2_inner,
    moment_transform,
    moment_values,
    v_from_ray_primitive,
)
from .tube_cascade import _transform, build_chart, cascade_solve, chart_inner_derivative, dv_normal_expansion

logger = logging.getLogger(__name__)

__all__ = ["Check", "RunReport", "EXPERIMENTS", "run_experiment", "truth_field"]


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    op: str = "<="

    @property
    def passed(self) -> bool:
        if not math.isfinite(self.value):
            return False
        return self.value <= self.threshold if self.op == "<=" else self.value > self.threshold


@dataclass
class RunReport:
    experiment: str
    config: dict
    checks: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, value: float, threshold: float, op: str = "<=") -> Check:
        c = Check(name, float(value), float(threshold), op)
        self.checks.append(c)
        return c

    @contextmanager
    def timed(self, label: str):
        t0 = time.perf_counter()
        yield
        self.timings[label] = self.timings.get(label, 0.0) + time.perf_counter() - t0

    def summary(self) -> str:
        lines = [f"experiment: {self.experiment}", f"result: {'PASS' if self.passed else 'FAIL'}", "", "checks:"]
        for c in self.checks:
            rel = "<=" if c.op == "<=" else ">"
            lines.append(f"  [{'PASS' if c.passed else 'FAIL'}] {c.name} = {c.value:.6g} ({rel} {c.threshold:.3g})")
        lines += ["", "timings (s):"] + [f"  {k}: {v:.3f}" for k, v in self.timings.items()]
        if self.notes:
            lines += ["", "notes:"] + [f"  {n}" for n in self.notes]
        lines += ["", "files:"] + [f"  {Path(p).name}" for p in self.files]
        lines += ["", "config:", json.dumps(self.config, indent=2, sort_keys=True)]
        return "\n".join(lines) + "\n"

    def write(self, out: Path) -> None:
        self.files.append(io.write_report(out / "report.csv", self.checks))
        self.files.append(out / "summary.txt")
        (out / "summary.txt").write_text(self.summary())


# --------------------------------------------------------------------------
# helpers


def truth_field(cfg: ExperimentConfig, g, order: int | None = None, rng=None) -> FunctionField:
    """Configured test field; ``mixed`` is a curl field plus ``dφ``, ``potential`` is ``dφ``."""
    order = cfg.m if order is None else order
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    params = dict(cfg.field.params)
    radius = cfg.domain.radius
    if cfg.field.recipe in ("mixed", "potential"):
        if order != 1:
            raise ValueError(f"the {cfg.field.recipe} recipe has tensor order 1")
        phi = polynomial_potential(0, np.array([[params.pop("amplitude", 1.0)]]), 2, radius, 0)
        dphi = inner_derivative(phi, g)
        if cfg.field.recipe == "potential":
            return dphi
        return curl_field(radius=radius, rng=rng, **params) + dphi
    return build_recipe(cfg.field.recipe, order, params, rng, radius)


def _gnuplot(path: Path, data: str, using: str, title: str, style: str = "points pt 5 ps 0.5 palette") -> Path:
    path.write_text(
        "set datafile separator ','\n"
        f"set title '{title}'\n"
        "set size ratio -1\n"
        f"plot '{data}' every ::1 using {using} with {style} notitle\n"
    )
    return path


def _residual_plot(path: Path, data: str) -> Path:
    path.write_text(
        "set datafile separator ','\n"
        "set logscale y\n"
        "set xlabel 'iteration'\nset ylabel 'residual'\n"
        f"plot '{data}' every ::1 using 2:3 with lines title 'CGLS residual'\n"
    )
    return path


def _fan(cfg: ExperimentConfig, g, dom, step=None, threads=1):
    return make_fan(g, dom, cfg.fan.n_points, cfg.fan.n_dirs, cfg.fan.step if step is None else step, threads)


def _geometry_checks(report: RunReport, g, dom, fan) -> None:
    speed = g.norm(fan.positions, fan.velocities)
    drift = np.where(fan.valid, np.abs(speed - 1.0), 0.0)
    report.add("speed_drift", drift.max(), 1e-6)
    if g.kind == "euclidean":
        chord = 2 * dom.radius * np.cos(fan.dir_angles)
        report.add("chord_length_error", np.abs(fan.exit_params - chord).max(), 1e-9)


def _random_unit_samples(g, dom, n, rng):
    r = dom.radius * 0.9 * np.sqrt(rng.uniform(size=n))
    th = rng.uniform(0, 2 * np.pi, size=n)
    x = np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)
    phi = rng.uniform(0, 2 * np.pi, size=n)
    xi = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    return x, xi / g.norm(x, xi)[:, None]


# --------------------------------------------------------------------------
# experiments


def exp_forward(cfg, out, report, threads):
    g, dom = cfg.metric.build(), cfg.domain.build()
    rng = np.random.default_rng(cfg.seed)
    with report.timed("trace"):
        fan = _fan(cfg, g, dom, threads=threads)
    f = truth_field(cfg, g, rng=rng)
    with report.timed("moments"):
        sinos = [moment_transform(f, fan, q) for q in cfg.moment_orders]
    report.files.append(io.write_sinogram(out / "sinogram.csv", sinos))
    report.files.append(_gnuplot(out / "sinogram.gp", "sinogram.csv", "2:3:5", "moment sinogram"))
    grid = Grid(cfg.N, dom.radius)
    report.files.append(io.write_field(out / "field.csv", f.sample(grid)))
    report.files.append(_gnuplot(out / "field.gp", "field.csv", "1:2:4", "field component c_1"))
    report.add("sinogram_nonfinite", sum(int(np.sum(~np.isfinite(s.values))) for s in sinos), 0)
    _geometry_checks(report, g, dom, fan)
    if cfg.field.recipe == "constant" and cfg.m == 0 and g.kind == "euclidean" and 0 in cfg.moment_orders:
        value = float(cfg.field.params.get("value", 1.0))
        chord = 2 * dom.radius * np.cos(fan.dir_angles)
        report.add("constant_chord_values", np.abs(sinos[0].values - value * chord).max(), 1e-6)


def exp_identities(cfg, out, report, threads):
    g, dom = cfg.metric.build(), cfg.domain.build()
    rng = np.random.default_rng(cfg.seed)
    with report.timed("trace"):
        fan = _fan(cfg, g, dom, threads=threads)
    order = max(cfg.m - 1, 0)
    v = random_potential(order, rng, degree=3, power=2, radius=dom.radius)
    dv = inner_derivative(v, g)
    qs = sorted(set(cfg.moment_orders) | {0})
    with report.timed("moments"):
        m_dv = moment_values(dv, fan, qs)
        m_v = moment_values(v, fan, qs)
    report.add("kernel_I0_dv", np.abs(m_dv[0]).max(), 5e-5)
    rows = [[i, fan.boundary_angles[i], fan.dir_angles[i], 0, m_dv[0, i]] for i in range(len(fan))]
    for k in qs:
        if k >= 1:
            res = np.abs(m_dv[qs.index(k)] + k * m_v[qs.index(k - 1)])
            report.add(f"moment_shift_k{k}", res.max(), 5e-5)
            rows += [[i, fan.boundary_angles[i], fan.dir_angles[i], k, res[i]] for i in range(len(fan))]
    report.files.append(io.write_rows(out / "identity_residuals.csv", io.SINOGRAM_HEADER, rows))
    h_order = min(cfg.m, 2)
    h = random_potential(h_order, rng, degree=3, power=3, radius=dom.radius)
    x, xi = _random_unit_samples(g, dom, cfg.samples, rng)
    with report.timed("generator"):
        gen = generator_identity_check(h, g, dom, x, xi)
    report.add(f"generator_identity_m{h_order}", gen.max_residual, 1e-4)


def exp_decompose(cfg, out, report, threads):
    g, dom = cfg.metric.build(), cfg.domain.build()
    rng = np.random.default_rng(cfg.seed)
    if cfg.m < 1:
        raise ValueError("m: decomposition needs m >= 1")
    grid = Grid(cfg.N, dom.radius)
    f = truth_field(cfg, g, rng=rng).sample(grid, dom.radius)
    with report.timed("decompose"):
        dec = solenoidal_decompose(f, g, rtol=cfg.solver.rtol)
    norm_f = math.sqrt(max(l2_inner(f, f, g), 1e-300))
    dv = f - dec.f_s
    cross = abs(l2_inner(dec.f_s, dv, g))
    denom = math.sqrt(max(l2_inner(dec.f_s, dec.f_s, g) * l2_inner(dv, dv, g), 1e-300))
    report.add("delta_residual_rel", dec.div_residual / norm_f, 1e-6)
    report.add("reassembly_rel", dec.reassembly_residual / norm_f, 1e-6)
    report.add("orthogonality_rel", cross / denom, 1e-4)
    report.files += io.write_decomposition(out / "decomp", dec)
    with report.timed("multi_decompose"):
        multi = multi_decompose(f, g, rtol=cfg.solver.rtol)
    report.files += io.write_decomposition(out / "decomp", multi)
    inner = interior_nodes(f)
    total = compose_potentials(multi.parts, g)
    diff = np.abs(total.values - f.values)[inner].max()
    report.add("multi_reassembly_rel", diff / max(f.max_abs(), 1e-300), 1e-4)
    hist = [[s, i, r] for s, st in enumerate(multi.stages) for i, r in enumerate(st.cg_residuals)]
    report.files.append(io.write_rows(out / "residuals.csv", ["stage", "iteration", "residual"], hist))
    report.files.append(_residual_plot(out / "residuals.gp", "residuals.csv"))
    report.files.append(_gnuplot(out / "decomp_fs.gp", "decomp_fs.csv", "1:2:4", "solenoidal part c_1"))


def exp_cascade(cfg, out, report, threads):
    g, dom = cfg.metric.build(), cfg.domain.build()
    rng = np.random.default_rng(cfg.seed)
    grid = Grid(cfg.N, dom.radius)
    with report.timed("trace"):
        fan = _fan(cfg, g, dom, step=cfg.solver.step, threads=threads)
    f = truth_field(cfg, g, rng=rng)
    with report.timed("moments"):
        data = list(moment_values(f, fan, list(range(cfg.m + 1))))
    sinos = [MomentSinogram(q, cfg.m, fan.boundary_angles, fan.dir_angles, d) for q, d in enumerate(data)]
    report.files.append(io.write_sinogram(out / "sinogram.csv", sinos))
    kw = dict(lam=cfg.solver.lam, radius=dom.radius, rtol=cfg.solver.rtol, max_iter=cfg.solver.max_iter)
    with report.timed("reconstruct"):
        rec = cascade_reconstruct(data, fan, g, grid, truth=f, **kw)
    report.add("reconstruction_rel_error", rec.rel_error, 8e-2)
    mask = grid.disk_mask(dom.radius)
    inner = _stencil_interior(mask)
    v0 = rec.parts[0]
    if v0.order >= 1:
        dv0 = divergence(v0, g)
        report.add("stage0_delta_rel", dv0.norm(inner.astype(float)) / max(v0.norm(), 1e-300), 1e-3)
    increases = sum(int(np.sum(np.diff(h) > 1e-12 * max(h[0], 1e-300))) for h in rec.stage_residuals)
    report.add("cg_residual_increases", increases, 0)
    with report.timed("zero_data"):
        zero = cascade_reconstruct([np.zeros(len(fan))] * (cfg.m + 1), fan, g, grid, **kw)
    report.add("zero_data_norm", zero.f_hat.norm(), 1e-6)
    with report.timed("linearity"):
        scaled = cascade_reconstruct([-3.0 * d for d in data], fan, g, grid, **kw)
    lin = np.abs(scaled.f_hat.values + 3.0 * rec.f_hat.values).max() / max(3.0 * rec.f_hat.max_abs(), 1e-300)
    # holds to CGLS tolerance, not bitwise
    report.add("linearity_rel", lin, 1e-4)
    report.files.append(io.write_field(out / "fhat.csv", rec.f_hat.with_values(rec.f_hat.values * mask[..., None])))
    report.files += [io.write_field(out / f"cascade_vk{i}.csv", p) for i, p in enumerate(rec.parts)]
    hist = [[s, i, r] for s, h in enumerate(rec.stage_residuals) for i, r in enumerate(h)]
    report.files.append(io.write_rows(out / "residuals.csv", ["stage", "iteration", "residual"], hist))
    report.files.append(_residual_plot(out / "residuals.gp", "residuals.csv"))
    report.files.append(_gnuplot(out / "fhat.gp", "fhat.csv", "1:2:4", "reconstruction c_1"))
    report.notes += rec.warnings


def exp_tube(cfg, out, report, threads):
    g, dom = cfg.metric.build(), cfg.domain.build()
    rng = np.random.default_rng(cfg.seed)
    if cfg.m < 1:
        raise ValueError("m: the cascade needs m >= 1")
    ext = dom.extended()
    tc = cfg.tube
    x0 = ext.boundary_point(tc.boundary_angle)
    nu = ext.normal(g, x0[None])[0]
    tau = ext.tangent(g, x0[None])[0]
    direction = -math.cos(tc.dir_angle) * nu + math.sin(tc.dir_angle) * tau
    with report.timed("chart"):
        chart = build_chart(g, ext, (x0, direction), tc.eps, (tc.n_xp, tc.n_xn), cfg.fan.step)
    report.files.append(io.write_chart(out / "chart.csv", chart))
    report.files.append(_gnuplot(out / "chart.gp", "chart.csv", "3:4:5", "chart nodes coloured by g11"))
    report.add("chart_metric_defect", chart.metric_defect(), 1e-4)
    report.add("chart_christoffel_defect", chart.christoffel_defect(), 1e-3)
    f = truth_field(cfg, g, rng=rng)
    with report.timed("cascade"):
        res = cascade_solve(f, chart)
    report.add("cascade_normal_residual_rel", res.relative_residual, 1e-3)
    dv = chart_inner_derivative(res.v, chart, cfg.m - 1)
    inner = chart.interior(3)
    worst = 0.0
    for k in range(cfg.m + 1):
        exp = dv_normal_expansion(res.v, chart, k, cfg.m - 1)
        cols = [
            pack_index([2] * (cfg.m - k) + [i + 1 for i in idx], 2)
            for idx in itertools.combinations_with_replacement(range(2), k)
        ]
        worst = max(worst, float(np.abs(exp - dv[..., cols])[inner].max()))
    report.add("expansion_vs_generic_rel", worst / max(float(np.abs(dv).max()), 1e-300), 1e-3)
    # cascade against the invariant construction at a few chart nodes
    nodes = [(tc.n_xp // 2, tc.n_xn // 2), (tc.n_xp // 4, tc.n_xn // 3), (3 * tc.n_xp // 4, 2 * tc.n_xn // 3)]
    x = np.array([chart.world[n] for n in nodes])
    en = np.array([chart.e_n[n] for n in nodes])
    jac = np.array([chart.jac[n] for n in nodes])
    with report.timed("ray_primitive"):
        vw = v_from_ray_primitive(f, g, ext, x, en, step=cfg.fan.step, threads=threads)
    vc = np.array([res.v[n] for n in nodes])
    diff = np.abs(_transform(vw, jac, cfg.m - 1) - vc).max()
    report.add("cascade_vs_invariant_rel", diff / max(float(np.abs(vc).max()), 1e-12), 1e-2)
    if tc.xi_check_points:
        cols = np.linspace(tc.n_xn // 4, 3 * tc.n_xn // 4, tc.xi_check_points).astype(int)
        pts = chart.world[tc.n_xp // 2, cols]
        en_pts = chart.e_n[tc.n_xp // 2, cols]
        with report.timed("xi_derivatives"):
            cc = xi_derivative_check(f, g, ext, pts, en_pts)
        report.add("xi_derivatives_at_en", cc.max_residual, 1e-3)
    v_rows = np.concatenate([chart.dump_rows()[:, :4], res.v.reshape(-1, cfg.m)], axis=1)
    header = ["xp", "xn", "world_x1", "world_x2"] + [f"v_{i}" for i in range(cfg.m)]
    report.files.append(io.write_rows(out / "tube_v.csv", header, v_rows))


def exp_support(cfg, out, report, threads):
    g, dom = cfg.metric.build(), cfg.domain.build()
    rng = np.random.default_rng(cfg.seed)
    kcfg = cfg.K if cfg.K is not None else ConvexConfig()
    k_set = kcfg.build()
    grid = Grid(cfg.N, dom.radius)
    f = truth_field(cfg, g, rng=rng)
    with report.timed("trace"):
        fan = _fan(cfg, g, dom, step=cfg.solver.step, threads=threads)
    with report.timed("support"):
        rep = support_experiment(f, k_set, g, grid, dom, fan=fan, margin=kcfg.margin, lam=cfg.solver.lam)
    report.add("K_convex_excursion", rep.convex_margin, 1e-8)
    for q, val in rep.max_moments.items():
        report.add(f"avoiding_max_I{q}", val, 1e-6)
    report.add("zero_data_covered_norm", rep.zero_data_norm, 1e-4 * rep.n_avoiding)
    report.notes.append(f"{rep.n_avoiding} of {rep.n_fan} geodesics avoid K")
    report.notes.append(f"reconstruction from avoiding-fan data: covered-region norm {rep.data_norm:.6g}")
    cov = rep.covered
    pts = grid.points()
    rows = [[pts[i, j, 0], pts[i, j, 1], int(cov[i, j])] for i in range(grid.n) for j in range(grid.n)]
    report.files.append(io.write_rows(out / "covered.csv", ["x1", "x2", "covered"], rows))
    report.files.append(_gnuplot(out / "covered.gp", "covered.csv", "1:2:3", "covered region"))


def exp_simplicity(cfg, out, report, threads):
    g, dom = cfg.metric.build(), cfg.domain.build()
    with report.timed("simplicity"):
        rep = simplicity_check(g, dom)
    report.add("boundary_convexity_margin", rep.convex_margin, 0.0, op=">")
    report.add("jacobi_margin", rep.jacobi_margin, 0.0, op=">")
    report.notes.append(rep.summary())
    with report.timed("trace"):
        fan = _fan(cfg, g, dom, threads=threads)
    _geometry_checks(report, g, dom, fan)
    rows = [[i, fan.boundary_angles[i], fan.dir_angles[i], fan.exit_params[i]] for i in range(len(fan))]
    report.files.append(io.write_rows(out / "exit_params.csv", ["geodesic_id", "boundary_angle", "dir_angle", "length"], rows))


EXPERIMENTS = {
    "forward": exp_forward,
    "identities": exp_identities,
    "decompose": exp_decompose,
    "cascade": exp_cascade,
    "tube": exp_tube,
    "support": exp_support,
    "simplicity": exp_simplicity,
}


def run_experiment(cfg: ExperimentConfig, name: str, out, threads: int = 1) -> RunReport:
    """Run one named experiment, writing all outputs into ``out``."""
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport(name, cfg.model_dump(mode="json"))
    EXPERIMENTS[name](cfg, out, report, threads)
    report.write(out)
    return report
