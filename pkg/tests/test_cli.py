from __future__ import annotations

import csv
import json

import pytest

from nashkuiper.cli import load_snapshot, main
from nashkuiper.config import OUTPUT_ENV


def test_verify_profiles_ok(capsys):
    assert main(["verify", "--suite", "profiles"]) == 0
    out = capsys.readouterr().out
    assert "profiles" in out and "PASS" in out


def test_verify_fault_fails(capsys):
    code = main(["verify", "--suite", "steps", "--n", "129", "--count", "2", "--lam", "16", "--fault-s3", "1.01"])
    assert code == 1
    assert "failed suites: steps" in capsys.readouterr().out


def test_verify_underresolved_is_gate_error(capsys):
    assert main(["verify", "--n", "129", "--lam", "100"]) == 2
    assert "grid-underresolved" in capsys.readouterr().err


def test_validate_schedule(tmp_path, capsys):
    assert main(["validate-schedule", "-o", str(tmp_path)]) == 0
    assert "schedule feasible" in capsys.readouterr().out
    assert json.loads((tmp_path / "schedule.json").read_text())["feasible"]
    assert main(["validate-schedule", "--set", "schedule.C=1e9"]) == 2
    assert "violated: lhs=" in capsys.readouterr().out


def test_bad_config_is_gate_error(capsys):
    assert main(["run", "--set", "run.alpha=0.9"]) == 2
    assert "alpha-out-of-range" in capsys.readouterr().err
    assert main(["run", "--set", "grid.nn=3"]) == 2


@pytest.fixture
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["run", "--set", "grid.n=129", "--set", "schedule.a=10.0", "--set", "run.n_iters=0", "-o", str(out)])
    assert code == 0
    return out


def test_run_writes_artifacts(run_dir):
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    rows = list(csv.DictReader(open(run_dir / "metrics.csv")))
    assert rows and rows[0]["kind"] == "iterate"
    st, n = load_snapshot(run_dir / "iterate_000.npz")
    assert n == 0 and st.spec.n == 129
    assert "grid.n = 129" in (run_dir / "config.txt").read_text()


def test_export_mesh_from_snapshot(run_dir, tmp_path, capsys):
    code = main(["export-mesh", "--snapshot", str(run_dir / "iterate_000.npz"), "-o", str(tmp_path), "--name", "m"])
    assert code == 0
    assert (tmp_path / "m.obj").exists() and (tmp_path / "m.vtk").exists()
    assert main(["export-mesh", "-o", str(tmp_path)]) == 2


def test_output_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert main(["validate-schedule", "-o", str(tmp_path / "arg")]) == 0
    assert (tmp_path / "env" / "schedule.json").exists()
    assert not (tmp_path / "arg").exists()


def test_stage_gate_message(capsys, tmp_path):
    code = main(["stage", "--set", "stage.sigma=1.5", "--set", "stage.delta=0.5", "-o", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "stage gate sigma^(3N+3)*delta <= 1 violated" in err
