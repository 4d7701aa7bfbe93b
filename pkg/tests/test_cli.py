import json
import shutil
import subprocess
import sys
import time
from pathlib import Path

import pytest

from ddctree.cli import main

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.yaml"


def test_smoke_experiment_under_ten_seconds(tmp_path):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "ddctree", "experiment", "--config", str(SMOKE),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr
    assert elapsed < 10.0
    for name in ("rounds.csv", "aggregate.csv", "report.txt", "timings.csv", "meta.json"):
        assert (tmp_path / name).exists(), name
    assert sorted(p.name for p in (tmp_path / "trees").iterdir()) == ["round_000_k1.tree", "round_000_k4.tree"]
    assert (tmp_path / "truth" / "round_000.json").exists()
    assert json.loads((tmp_path / "meta.json").read_text())["label"].startswith("study1")
    assert "c_m" in proc.stdout


def test_pipeline_subcommands(tmp_path, capsys):
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", str(SMOKE), "--out", str(sim)]) == 0
    assert (sim / "panel.csv").exists() and (sim / "truth.tree").exists()
    cfg = tmp_path / "panel.yaml"
    cfg.write_text(
        f"panel:\n  path: {sim / 'panel.csv'}\n  discretization: {sim / 'truth.tree'}\n"
        "partitioner:\n  max_partitions: [2, 4]\n  lambda_rel: [0, 1]\n"
        "tuning:\n  validation_fraction: 0.3\n"
        "estimator:\n  beta: 0.95\n  tolerance: 1.0e-10\n  gtol: 1.0e-6\n  n_restarts: 1\n"
    )
    assert main(["discretize", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d").glob("*.tree"))) == 4
    assert main(["tune", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "best.tree").exists()
    assert len((tmp_path / "t" / "tuning.csv").read_text().splitlines()) == 5
    assert main(["estimate", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 0
    rows = (tmp_path / "e" / "estimates.csv").read_text().splitlines()
    assert rows[0] == "parameter,estimate,std_error" and len(rows) == 6
    assert "log-likelihood" in capsys.readouterr().out


def test_report_rebuilds_tables(tmp_path):
    out = tmp_path / "run"
    assert main(["experiment", "--config", str(SMOKE), "--out", str(out)]) == 0
    assert main(["report", str(out), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "report.txt").read_text() == (out / "report.txt").read_text()


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as info:
        main(["bogus"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["experiment"])
    assert info.value.code == 1
    assert main(["experiment", "--config", str(SMOKE), "--jobs", "0"]) == 1


def test_validation_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("dgp:\n  study: 3\n")
    assert main(["experiment", "--config", str(bad)]) == 2
    assert "bad.yaml:2:" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["report", str(tmp_path / "nothing")]) == 2
    (tmp_path / "p.csv").write_text("agent,period,x,d,q1\n0,1,1,0,0\n0,3,1,0,0\n")
    cfg = tmp_path / "c.yaml"
    cfg.write_text("panel:\n  path: p.csv\n")
    assert main(["discretize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "non-consecutive" in capsys.readouterr().err


def test_failed_round_exits_3(tmp_path, monkeypatch):
    import ddctree.experiment as ex

    def broken(train, hp):
        raise RuntimeError("boom")

    monkeypatch.setattr(ex, "grow", broken)
    assert main(["experiment", "--config", str(SMOKE), "--out", str(tmp_path)]) == 3
    assert "boom" in (tmp_path / "failures.csv").read_text()


def test_console_script_installed():
    exe = shutil.which("ddctree")
    if exe is None:
        pytest.skip("console script not on PATH")
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "experiment" in proc.stdout
