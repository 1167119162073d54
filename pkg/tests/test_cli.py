"""Command-line interface: exit codes, file outputs, determinism."""

import json

import numpy as np
import pytest
import yaml

from bisweep.cli import (
    EXIT_CERTIFICATE,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VALIDATION,
    main,
)
from bisweep.geometry import save_scenario, straight_corridor


def write_config(tmp_path, name="scenario.yaml", run=None, **overrides):
    s = straight_corridor(**overrides)
    path = tmp_path / name
    save_scenario(s, path)
    if run:
        data = yaml.safe_load(path.read_text())
        data["run"] = run
        path.write_text(yaml.safe_dump(data))
    return path


def write_profile(tmp_path, n=10, u=(0.0, 0.0), u0=0.0, v=(0.0, 0.0),
                  omega=1.0, gamma=None, x_init=(0.0, 0.0)):
    m = n + 1
    data = {
        "v": [list(v)] * m,
        "u": [list(u)] * m,
        "u0": [float(u0)] * m,
        "omega": [float(omega)] * m,
        "x_init": list(x_init),
    }
    if gamma is not None:
        data["gamma"] = gamma
    path = tmp_path / "profile.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


TINY_RUN = {"n_intervals": 8, "seeds": 1, "lower_max_iter": 15, "upper_max_iter": 6}


# ---------------------------------------------------------------- validate
def test_validate_default_scenario_ok(capsys):
    assert main(["validate"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "ok" in out


def test_validate_flags_bad_truncation_level(tmp_path, capsys):
    cfg = write_config(tmp_path, M=5.0)
    assert main(["validate", "--config", str(cfg)]) == EXIT_VALIDATION
    assert "H5" in capsys.readouterr().out


def test_validate_malformed_file(tmp_path):
    bad = tmp_path / "broken.yaml"
    bad.write_text("geometry: [unclosed")
    assert main(["validate", "--config", str(bad)]) == EXIT_USAGE


def test_validate_writes_report(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["validate", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "validation.json").read_text())
    assert report["ok"] is True


def test_missing_subcommand_is_usage_error():
    assert main([]) == EXIT_USAGE


# ---------------------------------------------------------------- simulate
def test_simulate_requires_profile():
    assert main(["simulate"]) == EXIT_USAGE


def test_simulate_zero_controls_constant_trajectory(tmp_path):
    prof = write_profile(tmp_path)
    out = tmp_path / "sim"
    assert main(["simulate", "--profile", str(prof), "--out", str(out)]) == EXIT_OK
    rows = (out / "trajectory.csv").read_text().strip().splitlines()
    assert len(rows) == 12  # header + 11 nodes
    first = rows[1].split(",")
    last = rows[-1].split(",")
    # x and y columns frozen
    assert first[2:6] == last[2:6]
    feas = json.loads((out / "feasibility.json").read_text())
    assert feas["max_h_lower"] <= 1e-9


def test_simulate_smooth_when_gamma_given(tmp_path, capsys):
    prof = write_profile(tmp_path, u=(1.0, 0.0), u0=1.0, omega=2.0,
                         x_init=(1.0, 0.0), gamma=24.0)
    assert main(["simulate", "--profile", str(prof)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "T = 2.0" in out


# ---------------------------------------------------------------- solve
def test_solve_tiny_budget_writes_outputs(tmp_path):
    cfg = write_config(tmp_path, run=TINY_RUN)
    out = tmp_path / "sol"
    code = main(["solve", "--config", str(cfg), "--out", str(out),
                 "--rho-max", "4", "--gamma-max", "12"])
    assert code == EXIT_OK
    sol = json.loads((out / "solution.json").read_text())
    assert sol["T_star"] > 0
    assert (out / "trajectory.csv").exists()
    assert (out / "plot_data.json").exists()


def test_solve_deterministic_byte_identical(tmp_path):
    cfg = write_config(tmp_path, run=TINY_RUN)
    outs = []
    for d in ("a", "b"):
        out = tmp_path / d
        code = main(["solve", "--config", str(cfg), "--out", str(out),
                     "--seed", "3", "--rho-max", "2", "--gamma-max", "12"])
        assert code == EXIT_OK
        outs.append((out / "solution.json").read_bytes())
    assert outs[0] == outs[1]


def test_solve_rejects_invalid_scenario(tmp_path):
    cfg = write_config(tmp_path, M=5.0)
    assert main(["solve", "--config", str(cfg)]) == EXIT_VALIDATION


# ---------------------------------------------------------------- sweep-gamma
def test_sweep_gamma_reports_error_sequence(tmp_path, capsys):
    prof = write_profile(tmp_path, n=60, u=(1.0, 0.0), u0=1.0, omega=2.0,
                         x_init=(1.0, 0.0))
    out = tmp_path / "sweep"
    assert main(["sweep-gamma", "--profile", str(prof), "--out", str(out)]) == EXIT_OK
    data = json.loads((out / "gamma_sweep.json").read_text())
    assert len(data["gammas"]) == len(data["errors"]) == 6
    assert data["errors"][-1] < data["errors"][1]


def test_sweep_gamma_requires_profile():
    assert main(["sweep-gamma"]) == EXIT_USAGE
