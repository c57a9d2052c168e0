from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nashkuiper.config import OUTPUT_ENV, RunConfig, dump_config, load_config, parse_lines, parse_value
from nashkuiper.errors import NKError
from nashkuiper.export import defect_attribute, projection_matrix, read_vtk_points, write_obj, write_vtk
from nashkuiper.grid import GridSpec, from_function, grad
from nashkuiper.stage import flat_metric


@pytest.mark.parametrize(
    "text,value",
    [("3", 3), ("0.25", 0.25), ("1e-3", 1e-3), ("true", True), ("off", False), ("none", None), ("flat", "flat")],
)
def test_parse_value(text, value):
    assert parse_value(text) == value


def test_parse_lines_comments_and_errors():
    d = parse_lines(["# header", "", "grid.n = 129  # trailing", "stage.sigma=1.1"])
    assert d == {"grid.n": 129, "stage.sigma": 1.1}
    with pytest.raises(NKError):
        parse_lines(["grid.n 129"])
    with pytest.raises(NKError):
        parse_lines(["n = 129"])


def test_load_config_with_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("grid.n = 257\nschedule.a = 100.0\nstage.rho = 0.3\n")
    cfg = load_config(p, ["run.n_iters=2", "schedule.b=1.1"])
    assert cfg.n == 257 and cfg.n_iters == 2
    assert cfg.schedule.a == 100.0 and cfg.schedule.b == 1.1
    assert cfg.stage.rho == 0.3


def test_unknown_key_and_missing_file(tmp_path):
    with pytest.raises(NKError) as e:
        load_config(None, ["stage.sigmaa=1.1"])
    assert e.value.code == "config-invalid"
    with pytest.raises(NKError):
        load_config(tmp_path / "missing.cfg")


def test_validation_failures():
    with pytest.raises(NKError) as e:
        load_config(None, ["run.alpha=0.45"])
    assert e.value.code == "alpha-out-of-range"
    with pytest.raises(NKError):
        load_config(None, ["immersion.scale=1.2"])
    with pytest.raises(NKError):
        load_config(None, ["metric.preset=curved"])


def test_dump_roundtrip(tmp_path):
    cfg = load_config(None, ["grid.n=129", "stage.sigma=1.1", "schedule.tau=3.5", "run.initial_ratio=50.0"])
    p = tmp_path / "dump.cfg"
    p.write_text(dump_config(cfg))
    again = load_config(p)
    assert again.as_dict() == cfg.as_dict()


def test_output_env(monkeypatch, tmp_path):
    cfg = RunConfig(output_dir="elsewhere")
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    assert cfg.resolved_output_dir() == tmp_path
    monkeypatch.delenv(OUTPUT_ENV)
    assert str(cfg.resolved_output_dir()) == "elsewhere"


@given(st.integers(0, 3))
def test_drop_projection(k):
    P = projection_matrix(f"drop:{k}")
    assert P.shape == (3, 4) and np.all(P[:, k] == 0) and np.linalg.matrix_rank(P) == 3


def test_projection_errors():
    for bad in ("drop:7", "keep:1", "drop:x"):
        with pytest.raises(NKError):
            projection_matrix(bad)
    with pytest.raises(NKError):
        projection_matrix(np.zeros((3, 4)))


def surface(n=9):
    spec = GridSpec(n)
    return from_function(spec, lambda x, y: (x, y, x * y, 0.1 * x), "vec4")


def test_obj_export(tmp_path):
    u = surface()
    attr = defect_attribute(flat_metric(u.spec), grad(u.data, u.spec.h))
    count = write_obj(tmp_path / "s.obj", u, "drop:3", attr)
    lines = (tmp_path / "s.obj").read_text().splitlines()
    assert count == 81
    assert sum(1 for line in lines if line.startswith("v ")) == 81
    assert sum(1 for line in lines if line.startswith("vt ")) == 81
    faces = [line for line in lines if line.startswith("f ")]
    assert len(faces) == 64 and faces[0].count("/") == 4


def test_vtk_roundtrip(tmp_path):
    u = surface()
    attr = defect_attribute(flat_metric(u.spec), grad(u.data, u.spec.h))
    write_vtk(tmp_path / "s.vtk", u, "drop:0", {"defect norm": attr})
    dims, pts, data = read_vtk_points(tmp_path / "s.vtk")
    assert dims == (9, 9, 1)
    # the first grid index varies fastest
    np.testing.assert_allclose(pts[1], u.data[1, 0, 1:])
    np.testing.assert_allclose(pts[9], u.data[0, 1, 1:])
    np.testing.assert_allclose(data["defect_norm"], attr.data.T.ravel())


def test_export_needs_vec4(tmp_path):
    spec = GridSpec(9)
    with pytest.raises(NKError):
        write_obj(tmp_path / "x.obj", flat_metric(spec))
