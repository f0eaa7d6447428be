import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmt.cli import EXIT_INVARIANT, EXIT_OK, EXIT_SOLVER, EXIT_USAGE, main
from tmt.config import ConfigError, load_config, parse_config
from tmt.experiments import run_experiment
from tmt.fields import Grid, SymTensorField
from tmt.io import ParseError, read_field, read_report, read_sinogram, read_sinograms, write_field, write_sinogram
from tmt.symtensor import n_components
from tmt.transforms import MomentSinogram


def _random_field(rng, n=32, order=2):
    grid = Grid(n)
    vals = rng.normal(size=(n, n, n_components(2, order))) * 10.0 ** rng.integers(-300, 300, size=(n, n, 1))
    return SymTensorField(order, grid, vals, grid.disk_mask(1.0))


def _sino(rng, q, n=40):
    return MomentSinogram(q, 1, rng.uniform(0, 2 * np.pi, n), rng.uniform(-1.5, 1.5, n), rng.normal(size=n))


def _write_json(path, data):
    path.write_text(json.dumps(data))
    return path


# --------------------------------------------------------------------------
# serialization


@pytest.mark.parametrize("order", [0, 1, 2, 3])
def test_field_roundtrip_bitwise(tmp_path, rng, order):
    f = _random_field(rng, 32, order)
    back = read_field(write_field(tmp_path / "f.csv", f))
    assert back.order == order
    assert np.array_equal(back.values, f.values)
    assert np.array_equal(back.mask, f.mask)
    assert np.array_equal(back.grid.points(), f.grid.points())


def test_field_declared_order_mismatch(tmp_path, rng):
    path = write_field(tmp_path / "f.csv", _random_field(rng, 8, 2))
    with pytest.raises(ParseError) as exc:
        read_field(path, order=1)
    assert exc.value.line == 1


def test_field_bad_component_columns(tmp_path):
    (tmp_path / "f.csv").write_text("x1,x2,mask,c_1,c_12\n0,0,1,1,1\n")
    with pytest.raises(ParseError):
        read_field(tmp_path / "f.csv")


def test_field_malformed_value_line_number(tmp_path, rng):
    path = write_field(tmp_path / "f.csv", _random_field(rng, 4, 1))
    lines = path.read_text().splitlines()
    lines[3] = lines[3].rsplit(",", 1)[0] + ",abc"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as exc:
        read_field(path)
    assert exc.value.line == 4


def test_field_non_square_rows(tmp_path, rng):
    path = write_field(tmp_path / "f.csv", _random_field(rng, 4, 0))
    path.write_text("\n".join(path.read_text().splitlines()[:-1]) + "\n")
    with pytest.raises(ParseError):
        read_field(path)


def test_sinogram_roundtrip_preserves_order(tmp_path, rng):
    sinos = [_sino(rng, q) for q in range(3)]
    back = read_sinograms(write_sinogram(tmp_path / "s.csv", sinos), order=1)
    assert [s.q for s in back] == [0, 1, 2]
    for a, b in zip(sinos, back):
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.boundary_angles, b.boundary_angles)
        assert np.array_equal(a.dir_angles, b.dir_angles)


def test_single_sinogram_roundtrip(tmp_path, rng):
    s = _sino(rng, 0)
    back = read_sinogram(write_sinogram(tmp_path / "s.csv", s))
    assert np.array_equal(back.values, s.values)
    with pytest.raises(ParseError):
        read_sinogram(write_sinogram(tmp_path / "t.csv", [s, _sino(rng, 1)]))


@pytest.mark.parametrize(
    "text, line",
    [
        ("geodesic_id,q,value\n", 1),
        ("geodesic_id,boundary_angle,dir_angle,q,value\n0,0,0,0,1\n2,0,0,0,1\n", 3),
        ("geodesic_id,boundary_angle,dir_angle,q,value\n0,0,0,0.5,1\n", 2),
        ("geodesic_id,boundary_angle,dir_angle,q,value\n0,0,0,0\n", 2),
        ("", 1),
    ],
)
def test_sinogram_parse_errors(tmp_path, text, line):
    (tmp_path / "s.csv").write_text(text)
    with pytest.raises(ParseError) as exc:
        read_sinograms(tmp_path / "s.csv")
    assert exc.value.line == line


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_sinogram_roundtrip_any_float(tmp_path_factory, values):
    v = np.array(values)
    s = MomentSinogram(0, 0, np.zeros(v.size), np.zeros(v.size), v)
    path = tmp_path_factory.mktemp("h") / "s.csv"
    assert np.array_equal(read_sinogram(write_sinogram(path, s)).values, v)


# --------------------------------------------------------------------------
# configuration


def test_config_defaults():
    cfg = parse_config({"metric": "euclidean", "m": 1})
    assert cfg.N == 64
    assert (cfg.fan.n_points, cfg.fan.n_dirs) == (64, 32)
    assert cfg.solver.lam == 1e-3
    assert cfg.seed == 42
    assert cfg.moment_orders == [0, 1]


def test_config_conformal_shorthand():
    cfg = parse_config({"metric": "conformal: 0.1*(x1^2 + x2^2)"})
    g = cfg.metric.build()
    assert g.kind == "conformal"
    np.testing.assert_allclose(g.eval(np.array([[0.5, 0.0]]))[0], np.exp(0.05) * np.eye(2))


@pytest.mark.parametrize(
    "data, key",
    [
        ({"domain": {"radius": -1.0}}, "domain.radius"),
        ({"m": 1, "moments": [0, 3]}, "moments"),
        ({"moments": [-1]}, "moments"),
        ({"bogus": 1}, "bogus"),
        ({"solver": {"lamda": 1e-3}}, "solver.lamda"),
        ({"fan": {"n_dirs": 0}}, "fan.n_dirs"),
        ({"metric": "conformal"}, "metric"),
        ({"tube": {"n_xn": 41}}, "tube.n_xn"),
    ],
)
def test_config_errors_name_key(data, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(data)
    assert exc.value.key == key


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


# --------------------------------------------------------------------------
# experiments and CLI

FORWARD = {
    "metric": "euclidean",
    "m": 0,
    "N": 16,
    "fan": {"n_points": 16, "n_dirs": 9},
    "field": {"recipe": "constant", "params": {"value": 1.0}},
}
IDENTITIES = {"metric": "euclidean", "m": 2, "fan": {"n_points": 32, "n_dirs": 16}, "samples": 20}
SUPPORT = {
    "metric": "euclidean",
    "m": 1,
    "N": 32,
    "fan": {"n_points": 32, "n_dirs": 16},
    "field": {"recipe": "bump", "params": {"center": [0.0, 0.0], "support": 0.25}},
    "K": {"radius": 0.3},
}


def test_forward_diameter_chord(tmp_path):
    report = run_experiment(parse_config(FORWARD), "forward", tmp_path)
    assert report.passed
    sino = read_sinogram(tmp_path / "sinogram.csv")
    diam = sino.dir_angles == 0.0
    assert diam.sum() == 16
    np.testing.assert_allclose(sino.values[diam], 2.0, atol=1e-6)
    names = [c.name for c in report.checks]
    assert len(names) == len(set(names))
    assert (tmp_path / "summary.txt").read_text().startswith("experiment: forward")
    assert (tmp_path / "sinogram.gp").exists() and (tmp_path / "field.gp").exists()


def test_identities_report_contains_shift_check(tmp_path):
    report = run_experiment(parse_config(IDENTITIES), "identities", tmp_path)
    rows = {name: (value, ok) for name, value, _, ok in read_report(tmp_path / "report.csv")}
    for k in (1, 2):
        value, ok = rows[f"moment_shift_k{k}"]
        assert ok and value <= 5e-5
    assert rows["kernel_I0_dv"][1]
    assert report.passed


def test_support_bump_in_k(tmp_path):
    report = run_experiment(parse_config(SUPPORT), "support", tmp_path)
    checks = {c.name: c for c in report.checks}
    assert checks["avoiding_max_I0"].value <= 1e-6
    assert checks["avoiding_max_I1"].value <= 1e-6
    assert report.passed


def test_support_leakage_detected(tmp_path):
    cfg = dict(SUPPORT, field={"recipe": "bump", "params": {"center": [0.3, 0.0], "support": 0.25}})
    report = run_experiment(parse_config(cfg), "support", tmp_path)
    assert {c.name: c for c in report.checks}["avoiding_max_I0"].value > 1e-6
    assert not report.passed


def test_unknown_experiment(tmp_path):
    with pytest.raises(ValueError):
        run_experiment(parse_config({}), "nonsense", tmp_path)


def test_cli_exit_ok(tmp_path, capsys):
    cfg = _write_json(tmp_path / "c.json", FORWARD)
    assert main(["forward", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert "PASS constant_chord_values" in capsys.readouterr().out


def test_cli_exit_invariant(tmp_path):
    cfg = _write_json(
        tmp_path / "c.json",
        {"metric": "conformal:-2*(x1^2 + x2^2)", "m": 0, "fan": {"n_points": 8, "n_dirs": 5, "step": 5e-3}},
    )
    assert main(["simplicity", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INVARIANT
    rows = read_report(tmp_path / "o" / "report.csv")
    assert not {n: ok for n, _, _, ok in rows}["jacobi_margin"]


@pytest.mark.parametrize(
    "argv",
    [
        ["forward"],
        ["nonsense", "--config", "{cfg}"],
        ["forward", "--config", "{missing}"],
        ["forward", "--config", "{bad}"],
        ["forward", "--config", "{cfg}", "--threads", "0"],
        ["forward", "--config", "{cfg}", "--threads", "x"],
    ],
)
def test_cli_exit_usage(tmp_path, argv):
    paths = {
        "cfg": _write_json(tmp_path / "c.json", FORWARD),
        "bad": _write_json(tmp_path / "b.json", {"domain": {"radius": -1}}),
        "missing": tmp_path / "missing.json",
    }
    argv = [a.format(**paths) for a in argv] + ["--out", str(tmp_path / "o")]
    code = None
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == EXIT_USAGE


def test_cli_exit_solver(tmp_path, capsys):
    cfg = _write_json(
        tmp_path / "c.json",
        {
            "metric": "euclidean",
            "m": 1,
            "N": 32,
            "fan": {"n_points": 32, "n_dirs": 32},
            "field": {"recipe": "mixed"},
            "solver": {"max_iter": 3},
        },
    )
    assert main(["cascade", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_SOLVER
    assert "solver error in cascade" in capsys.readouterr().err


def test_cli_out_env_fallback(tmp_path, monkeypatch):
    cfg = _write_json(tmp_path / "c.json", FORWARD)
    monkeypatch.setenv("TMT_OUT", str(tmp_path / "env"))
    assert main(["forward", "--config", str(cfg)]) == EXIT_OK
    assert (tmp_path / "env" / "report.csv").exists()
    assert main(["forward", "--config", str(cfg), "--out", str(tmp_path / "flag")]) == EXIT_OK
    assert (tmp_path / "flag" / "report.csv").exists()


def test_cli_seed_override(tmp_path):
    cfg = _write_json(tmp_path / "c.json", dict(FORWARD, m=1, field={"recipe": "random_potential"}))
    for name, seed in [("a", "1"), ("b", "1"), ("c", "2")]:
        assert main(["forward", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", seed]) == EXIT_OK
    text = {n: (tmp_path / n / "sinogram.csv").read_bytes() for n in "abc"}
    assert text["a"] == text["b"] != text["c"]


@pytest.mark.parametrize("experiment, data", [("forward", FORWARD), ("identities", IDENTITIES), ("support", SUPPORT)])
def test_cli_deterministic_csv(tmp_path, experiment, data):
    cfg = _write_json(tmp_path / "c.json", data)
    for name, threads in [("a", "1"), ("b", "2")]:
        assert main([experiment, "--config", str(cfg), "--out", str(tmp_path / name), "--threads", threads]) == EXIT_OK
    csvs = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    assert csvs
    for name in csvs:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
