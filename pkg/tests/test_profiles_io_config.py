import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fcald.config import DEFAULT_THRESHOLDS, ExperimentConfig
from fcald.errors import ConfigError
from fcald.grid import boundary_index, build_grid
from fcald.io import dumps, read_field_csv, read_pgm, write_field_csv, write_pgm, write_rows_csv
from fcald.profiles import eval_expr, make_boundary, make_field, parse_profile, profile_files


def test_parse_profile():
    assert parse_profile("constant:1.0") == ("constant", {}, [1.0])
    kind, kw, _ = parse_profile("gaussian:center=(0.5,0.5),sigma=0.15,amp=1")
    assert kind == "gaussian" and kw == {"center": (0.5, 0.5), "sigma": 0.15, "amp": 1}
    assert parse_profile("expr:x*y") == ("expr", {}, ["x*y"])
    assert parse_profile("sin:m=2,mask=left+top")[1] == {"m": 2, "mask": "left+top"}
    assert parse_profile("bump:mask='arc:0:1'")[1] == {"mask": "arc:0:1"}
    for bad in (":1", "gaussian:sigma=", "gaussian:sigma=abs(1)"):
        with pytest.raises(ConfigError):
            parse_profile(bad)


def test_field_profile_examples(grid17):
    assert np.all(make_field(grid17, "constant:1.0") == 1.0)
    g = make_field(grid17, "gaussian:center=(0.5,0.5),sigma=0.15,amp=1")
    assert g[8, 8] == 1.0 and g.max() == 1.0
    X, Y = grid17.mesh()
    assert np.allclose(make_field(grid17, "expr:sin(pi*x)*y**2"), np.sin(np.pi * X) * Y**2)
    b = make_field(grid17, "bumps:centers=((0.25,0.25),(0.75,0.75)),sigma=0.1,amp=(1,2)")
    assert b[12, 12] == pytest.approx(2.0, rel=1e-3)
    for bad in ("gaussian:sigma=-1", "gaussian:width=1", "blob:1", "bumps:centers=((0,0),),amp=(1,2)"):
        with pytest.raises(ConfigError):
            make_field(grid17, bad)


@pytest.mark.parametrize("expr", ["__import__('os').getcwd()", "x.real", "[x]", "lambda: 1", "y if x else y",
                                  "open('f')", "z+1", "log(x-x)"])
def test_expr_whitelist(expr):
    X = np.linspace(0, 1, 5)
    with pytest.raises(ConfigError):
        eval_expr(expr, {"x": X, "y": X})


def test_boundary_profiles(grid17):
    b = boundary_index(grid17)
    assert np.allclose(make_boundary(grid17, "cos:k=1"), np.cos(np.pi * b.s))
    f = make_boundary(grid17, "bump:mask=left")
    assert f.max() == pytest.approx(1.0) and np.all(f >= 0)
    assert np.allclose(make_boundary(grid17, "expr:x+s"), b.points[:, 0] + b.s)
    s = make_boundary(grid17, "sin:m=2,mask=top")
    assert np.count_nonzero(s) > 0 and np.all(s[b.points[:, 1] < 1] == 0)
    with pytest.raises(ConfigError):
        make_boundary(grid17, "square:1")


def test_csv_field_profile(tmp_path, grid17):
    X, Y = grid17.mesh()
    write_field_csv(tmp_path / "q.csv", grid17, X * Y)
    assert np.array_equal(make_field(grid17, "csv:q.csv", tmp_path), X * Y)
    assert profile_files("csv:q.csv") == ["q.csv"] and profile_files("constant:1") == []
    with pytest.raises(ConfigError):
        make_field(build_grid((0, 0, 1, 1), 9), "csv:q.csv", tmp_path)


@given(st.integers(0, 2**31 - 1))
def test_field_csv_round_trip_exact(seed):
    import tempfile
    from pathlib import Path

    g = build_grid((0.0, -1.0, 2.0, 1.0), 9)
    u = np.random.default_rng(seed).normal(size=g.shape) * 10.0 ** np.random.default_rng(seed).integers(-300, 300)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "u.csv"
        write_field_csv(p, g, u)
        g2, back = read_field_csv(p)
        assert g2 == g and np.array_equal(back, u)
        text = p.read_text()
        write_field_csv(p, g, back)
        assert p.read_text() == text


def test_field_csv_layout(tmp_path):
    g = build_grid((0, 0, 1, 1), 9)
    X, Y = g.mesh()
    write_field_csv(tmp_path / "x.csv", g, X)
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines[0].startswith("# nx=9,ny=9,box=") and len(lines) == 10
    assert lines[1].split(",")[0] == "0.0" and lines[1].split(",")[-1] == "1.0"
    (tmp_path / "bad.csv").write_text("# nx=9\n1,2\n")
    with pytest.raises(ConfigError):
        read_field_csv(tmp_path / "bad.csv")
    with pytest.raises(ConfigError):
        read_field_csv(tmp_path / "missing.csv")
    with pytest.raises(ValueError):
        write_field_csv(tmp_path / "y.csv", g, np.zeros((3, 3)))


def test_pgm_orientation_and_sidecar(tmp_path):
    g = build_grid((0, 0, 1, 1), 9)
    X, Y = g.mesh()
    side = write_pgm(tmp_path / "y.pgm", 2 * Y - 1)
    img = read_pgm(tmp_path / "y.pgm")
    assert img.shape == (9, 9) and np.all(img[0] == 255) and np.all(img[-1] == 0)
    meta = json.loads((tmp_path / "y.pgm.json").read_text())
    assert meta["min"] == -1.0 and meta["max"] == 1.0 and meta == json.loads(dumps(side))
    write_pgm(tmp_path / "c.pgm", np.ones((4, 3)))
    assert np.all(read_pgm(tmp_path / "c.pgm") == 0)


def test_json_and_rows(tmp_path):
    text = dumps({"b": np.float64(1.5), "a": [np.int64(2), float("nan")], "c": np.arange(2), "d": 1 + 2j})
    assert json.loads(text) == {"a": [2, "nan"], "b": 1.5, "c": [0, 1], "d": [1.0, 2.0]}
    assert text.index('"a"') < text.index('"b"')
    write_rows_csv(tmp_path / "r.csv", ["x", "y"], [(0.1, "a"), (np.float64(1 / 3), 2)])
    assert (tmp_path / "r.csv").read_text() == "x,y\n0.1,a\n0.3333333333333333,2\n"


BASE = {"grid": {"n": 17}, "nonlinearity": {"terms": [{"r": 1.5, "q": "constant:1"}]}}


def cfg(**extra):
    return ExperimentConfig.from_dict(json.loads(json.dumps(BASE)) | extra)


def test_config_defaults_and_accessors():
    c = cfg()
    assert c.grid().nx == 17 and c.exponents() == [1.5] and c.trace == "stencil" and c.mask_selector == "all"
    assert c.threshold("l2_rel", "full") == 0.15 and c.threshold("l2_rel", "partial") == 0.25
    assert c.threshold("stage_rel") == DEFAULT_THRESHOLDS["stage_rel"]
    assert len(c.ladder()) == 6 and c.ladder().theta == 0.5
    assert cfg(ladder={"values": [0.02, 0.01]}).ladder().eps == (0.02, 0.01)
    assert cfg(thresholds={"l2_rel": 0.3}).threshold("l2_rel", "full") == 0.3
    assert c.recovery_exponents() == [1.5] and c.seed == 0
    assert cfg(forward={"smallness_gate": None}).forward_options().smallness_gate is None
    with pytest.raises(ConfigError):
        c.recovery()


def test_config_fingerprint_stable():
    assert cfg().fingerprint() == cfg().fingerprint()
    assert cfg().fingerprint() != cfg(seed=1).fingerprint()


@pytest.mark.parametrize("data", [
    {},
    {"grid": {"n": 4}},
    {"grid": {"n": 17}, "bogus": 1},
    {"grid": {"n": 17}, "nonlinearity": {"terms": [{"r": 2.5, "q": "constant:1"}, {"r": 1.5, "q": "constant:1"}]}},
    {"grid": {"n": 17}, "nonlinearity": {"terms": [{"r": 1.0, "q": "constant:1"}]}},
    {"grid": {"n": 17}, "nonlinearity": {"terms": [{"r": 1.5, "q": "csv:missing.csv"}]}},
    {"grid": {"n": 17}, "recovery": {"method": "staged"}},
    {"grid": {"n": 17}, "recovery": {"method": "partial", "d": 100}},
    {"grid": {"n": 17}, "ladder": {"values": [0.01, 0.02]}},
    {"grid": {"n": 17}, "forward": {"max_newton": 0}},
])
def test_config_rejects(data, tmp_path):
    with pytest.raises(ConfigError):
        c = ExperimentConfig.from_dict(data, tmp_path)
        c.ladder()
        c.forward_options()


def test_config_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "bad.json")
    (tmp_path / "ok.json").write_text(json.dumps(BASE))
    assert ExperimentConfig.load(tmp_path / "ok.json").base == tmp_path
