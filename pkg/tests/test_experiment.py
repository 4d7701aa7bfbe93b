import numpy as np
import pytest

from ddctree.config import parse_config
from ddctree.experiment import ResultTable, bootstrap_band, emit_report, round_seed, run_experiment, run_round

SMALL = """\
dgp:
  study: 1
  q_transition: random
  n_buses: 15
  n_periods: 15
  c_m: -0.2
  beta: 0.95
partitioner:
  max_partitions: [1, 4]
estimator:
  beta: 0.95
  tolerance: 1.0e-10
  gtol: 1.0e-6
  n_restarts: 1
replication:
  n_rounds: 3
  base_seed: 5
output:
  bootstrap_resamples: 200
"""


def _table(values, setting="k=1", metric="c_m"):
    recs = [{"round": r, "seed": r, "setting": setting, "metric": metric, "value": v} for r, v in enumerate(values)]
    return ResultTable(recs, [], "synthetic")


def test_round_seeds_are_stable_and_distinct():
    assert round_seed(0, 1) == round_seed(0, 1)
    assert len({round_seed(0, r) for r in range(100)}) == 100
    assert round_seed(0, 1) != round_seed(1, 0)


def test_bootstrap_single_round_collapses():
    assert bootstrap_band([-0.2]) == (-0.2, -0.2, -0.2)
    agg = _table([-0.2]).aggregate()
    assert (agg[0]["mean"], agg[0]["lo"], agg[0]["hi"]) == (-0.2, -0.2, -0.2)


def test_bootstrap_mean_and_reproducibility():
    vals = np.random.default_rng(0).normal(size=100)
    mean, lo, hi = bootstrap_band(vals, 1000, seed=3)
    assert abs(mean - sum(vals.tolist()) / 100) < 1e-12
    assert lo < mean < hi
    assert bootstrap_band(vals, 1000, seed=3) == (mean, lo, hi)
    assert bootstrap_band(vals, 1000, seed=4) != (mean, lo, hi)


def test_csv_roundtrip_and_report(tmp_path):
    t = _table([-0.1, -0.2, -0.3])
    t.to_csv(tmp_path / "r.csv")
    back = ResultTable.from_csv(tmp_path / "r.csv", "synthetic")
    assert back.values("k=1", "c_m") == [-0.1, -0.2, -0.3]
    text = emit_report([t], 100, 0)
    assert "c_m" in text and "-0.200" in text and "synthetic" in text


@pytest.fixture(scope="module")
def small_cfg():
    return parse_config(SMALL, "small.yaml")


def test_rounds_are_independent(small_cfg):
    a, _, fa = run_round(small_cfg, 2)
    b, _, fb = run_round(small_cfg, 2)
    assert fa is None and fb is None and a == b
    table = run_experiment(small_cfg, jobs=1)
    assert [r for r in table.records if r["round"] == 2] == a


def test_parallel_matches_serial(small_cfg, tmp_path):
    run_experiment(small_cfg, jobs=1, out_dir=tmp_path / "serial")
    run_experiment(small_cfg, jobs=2, out_dir=tmp_path / "parallel")
    for name in ("rounds.csv", "aggregate.csv", "report.txt"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "parallel" / name).read_bytes()


def test_failed_round_is_recorded(small_cfg, monkeypatch, tmp_path):
    import ddctree.experiment as ex

    real = ex.grow

    def flaky(train, hp):
        if hp.max_partitions == 4 and flaky.calls == 0:
            flaky.calls += 1
            raise RuntimeError("boom")
        return real(train, hp)

    flaky.calls = 0
    monkeypatch.setattr(ex, "grow", flaky)
    table = run_experiment(small_cfg, jobs=1, out_dir=tmp_path)
    assert len(table.failures) == 1 and "boom" in table.failures[0]["error"]
    assert (tmp_path / "failures.csv").exists()
    # the failed round leaves no partial records; the others complete
    assert {r["round"] for r in table.records} == {1, 2}
