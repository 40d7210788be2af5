#!/usr/bin/env python3
"""Tests for the mlkbf command line."""

import io

import pandas as pd
import pytest

from mlkbf.cli.main import main

RATES_CONFIG = """
model:
  preset: ou1
data:
  horizon: 1
  seed: 3
rates:
  levels: [3, 4]
  l_star: 2
  c0: 0.5
  repetitions: 3
  l_ref: 5
  reference_repetitions: 2
  reference_particles: 20
  seed: 1
"""

ESTIMATE_CONFIG = """
model:
  preset: ou1
  p0: 0.1
data:
  horizon: 3
  seed: 2
  theta_star: [-2.0]
ml:
  l_star: 2
  L: 3
  particles: [8, 4]
spsa:
  M: 3
  theta0: [-1.0]
  runs: 2
  seed: 5
"""


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    main(["gen-data", "--model", "ou5", "--c-seed", "2", "--level", "6", "--horizon", "1", "--seed", "1",
          "--out", str(out)])
    return out


def stdout_frame(capsys) -> pd.DataFrame:
    return pd.read_csv(io.StringIO(capsys.readouterr().out))


def test_gen_data_writes_record_and_header(data_dir):
    frame = pd.read_csv(data_dir / "observations.csv")
    assert list(frame.columns) == ["step", "dY_1", "dY_2", "dY_3", "dY_4", "dY_5"]
    assert len(frame) == 64
    header = (data_dir / "header.yaml").read_text()
    assert "level: 6" in header and "horizon: 1" in header


def test_kbf_command(data_dir, capsys, tmp_path):
    capsys.readouterr()
    main(["kbf", "--data", str(data_dir), "--level", "4", "--dump", str(tmp_path / "kbf.csv")])
    frame = stdout_frame(capsys)
    assert frame.loc[0, "steps"] == 16
    dump = pd.read_csv(tmp_path / "kbf.csv")
    assert len(dump) == 17 and "P_55" in dump.columns


def test_nc_command_is_deterministic(data_dir, capsys, tmp_path):
    capsys.readouterr()
    args = ["nc", "--data", str(data_dir), "--variant", "f2", "--level", "4", "--particles", "12", "--seed", "3"]
    main(args + ["--trace", str(tmp_path / "trace.csv")])
    first = capsys.readouterr().out
    main(args)
    assert capsys.readouterr().out == first
    trace = pd.read_csv(tmp_path / "trace.csv")
    assert len(trace) == 16
    assert trace["U"].iloc[-1] == pytest.approx(pd.read_csv(io.StringIO(first)).loc[0, "log_nc"])
    assert (tmp_path / "trace.csv.yaml").exists()


def test_ml_nc_command(data_dir, capsys):
    capsys.readouterr()
    main(["ml-nc", "--data", str(data_dir), "--variant", "f1", "--lstar", "2", "--L", "4", "--c0", "0.5",
          "--seed", "0"])
    frame = stdout_frame(capsys)
    assert frame["level"].tolist() == ["2", "3", "4", "total"]
    assert frame["N"].tolist()[:3] == [96, 48, 24]
    assert frame["contribution"].iloc[-1] == pytest.approx(frame["contribution"].iloc[:3].sum())


def test_rates_command_does_not_depend_on_jobs(tmp_path):
    config = tmp_path / "rates.yaml"
    config.write_text(RATES_CONFIG)
    main(["rates", "--config", str(config), "--out", str(tmp_path / "serial.csv"), "--jobs", "1"])
    main(["rates", "--config", str(config), "--out", str(tmp_path / "parallel.csv"), "--jobs", "2"])
    serial = (tmp_path / "serial.csv").read_bytes()
    assert serial == (tmp_path / "parallel.csv").read_bytes()
    frame = pd.read_csv(tmp_path / "serial.csv")
    assert frame["estimator"].tolist() == ["SL", "ML", "SL", "ML"]


def test_estimate_command(tmp_path):
    config = tmp_path / "estimate.yaml"
    config.write_text(ESTIMATE_CONFIG)
    main(["estimate", "--config", str(config), "--out", str(tmp_path / "serial.csv"),
          "--summary", str(tmp_path / "summary.csv"), "--jobs", "1"])
    main(["estimate", "--config", str(config), "--out", str(tmp_path / "parallel.csv"), "--jobs", "2"])
    assert (tmp_path / "serial.csv").read_bytes() == (tmp_path / "parallel.csv").read_bytes()
    trajectory = pd.read_csv(tmp_path / "serial.csv")
    assert len(trajectory) == 6
    assert {"run", "iter", "theta_1", "a_t_1", "b_t", "U_plus", "U_minus"} <= set(trajectory.columns)
    summary = pd.read_csv(tmp_path / "summary.csv")
    assert list(summary.columns) == ["iter", "mean_1", "std_1"]
    assert len(summary) == 4


def test_divergent_estimate_keeps_the_completed_iterations(tmp_path, capsys):
    config = tmp_path / "estimate.yaml"
    diverging = ESTIMATE_CONFIG.replace("  runs: 2\n", "  runs: 1\n  a0: 0.0\n  t0: 2\n  scale: [1.0e+300]\n")
    config.write_text(diverging)
    out = tmp_path / "trajectory.csv"
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--config", str(config), "--out", str(out)])
    assert exc.value.code == 1
    assert "Error:" in capsys.readouterr().err
    trajectory = pd.read_csv(out)
    assert list(trajectory["iter"]) == [1, 2]
    assert (trajectory["theta_1"] == -1.0).all()
    assert (trajectory["run"] == 0).all()


def test_errors_exit_with_status_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["kbf", "--data", str(tmp_path / "missing"), "--level", "3"])
    assert exc.value.code == 1
    assert "Error:" in capsys.readouterr().err

    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {preset: nowhere}\n")
    with pytest.raises(SystemExit):
        main(["rates", "--config", str(bad), "--out", str(tmp_path / "out.csv")])


def test_level_above_record_is_rejected(data_dir):
    with pytest.raises(SystemExit) as exc:
        main(["nc", "--data", str(data_dir), "--level", "7", "--particles", "4", "--seed", "0"])
    assert exc.value.code == 1
