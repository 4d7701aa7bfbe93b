"""Monte Carlo rounds: simulate, discretize, score, estimate, aggregate.

Each round draws its seed from ``(base_seed, round)`` alone, so any subset of
rounds can be rerun in isolation and the results do not depend on how rounds
are scheduled across workers.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .config import ExperimentConfig
from .nfxp import EstimationError, estimate_theta
from .panel import Panel, load_panel, split_train_validation
from .partitioner import Hyperparameters, grow, validation_score
from .simulator import DgpConfig, TruePartitionSpec, matched_leaves, random_discretization, sim1_truth, simulate
from .tree import Discretization

__all__ = [
    "ResultTable",
    "round_seed",
    "build_dgp",
    "run_round",
    "run_experiment",
    "bootstrap_band",
    "emit_report",
]

logger = logging.getLogger(__name__)

_KEYS = ("round", "seed", "setting", "metric", "value")
_SHORT = {"max_partitions": "k", "min_observations": "n_min", "min_lift": "lift", "lambda_rel": "lambda"}


def round_seed(base_seed: int, r: int) -> int:
    """Seed of round ``r``; a pure function of (base_seed, r)."""
    return int(np.random.SeedSequence([int(base_seed), int(r)]).generate_state(1)[0])


def setting_label(setting: dict, swept) -> str:
    if setting.get("tuned"):
        return "tuned"
    keys = list(swept) or ["max_partitions", "lambda_rel"]
    return ",".join(f"{_SHORT[k]}={setting[k]:g}" for k in keys)


def bootstrap_band(values, n_resamples: int = 1000, seed: int = 0, level: tuple = (2.0, 98.0)):
    """Mean and percentile band of the bootstrap distribution of the mean."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan, math.nan
    mean = float(np.mean(v))
    if v.size == 1:
        return mean, mean, mean
    rng = np.random.default_rng(seed)
    means = v[rng.integers(0, v.size, (n_resamples, v.size))].mean(axis=1)
    lo, hi = np.percentile(means, level)
    return mean, float(lo), float(hi)


@dataclass
class ResultTable:
    """Per-round long-format records plus the failures of a run.

    ``records`` rows carry ``round, seed, setting, metric, value``; the
    aggregate is recomputed from them on demand.
    """

    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    label: str = ""

    def settings(self) -> list[str]:
        return list(dict.fromkeys(r["setting"] for r in self.records))

    def metrics(self) -> list[str]:
        return list(dict.fromkeys(r["metric"] for r in self.records))

    def values(self, setting: str, metric: str) -> list[float]:
        rows = sorted((r for r in self.records if r["setting"] == setting and r["metric"] == metric),
                      key=lambda r: r["round"])
        return [float(r["value"]) for r in rows]

    def aggregate(self, n_resamples: int = 1000, seed: int = 0) -> list[dict]:
        out = []
        for s in self.settings():
            for m in self.metrics():
                vals = self.values(s, m)
                if not vals:
                    continue
                mean, lo, hi = bootstrap_band(vals, n_resamples, seed)
                out.append({"setting": s, "metric": m, "n": len(vals), "mean": mean, "lo": lo, "hi": hi})
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(_KEYS)
            for r in self.records:
                w.writerow([r["round"], r["seed"], r["setting"], r["metric"], repr(float(r["value"]))])

    @classmethod
    def from_csv(cls, path, label: str = "") -> ResultTable:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        missing = set(_KEYS) - set(rows[0].keys()) if rows else set()
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        recs = [{"round": int(r["round"]), "seed": int(r["seed"]), "setting": r["setting"],
                 "metric": r["metric"], "value": float(r["value"])} for r in rows]
        return cls(recs, [], label)


def build_dgp(cfg: ExperimentConfig, seed: int) -> DgpConfig:
    d = cfg.dgp
    if d.study == 1:
        truth = sim1_truth(d.dissimilar_costs, d.dissimilar_transitions, d.n_dims, d.mileage_steps)
    else:
        truth = random_discretization(seed, d.n_splits, d.relevant_dims, d.total_dims,
                                      d.dissimilar_transitions)
    return DgpConfig(truth, d.q_transition, d.n_buses, d.n_periods, d.c_m, d.beta, seed,
                     x_min=min(1, d.replace_floor, d.x_init), x_init=d.x_init, replace_floor=d.replace_floor,
                     tolerance=d.tolerance)


def dgp_label(cfg: ExperimentConfig) -> str:
    d = cfg.dgp
    if d is None:
        return Path(cfg.panel.path).name
    cost = "dissimilar" if d.dissimilar_costs else "similar"
    mil = "dissimilar" if d.dissimilar_transitions else "similar"
    if d.mileage_steps is not None:
        mil = "steps=" + "/".join(map(str, d.mileage_steps))
    if d.study == 1:
        return f"study1 cost={cost} mileage={mil} q={d.q_transition}"
    return f"study2 mileage={mil} q={d.q_transition} T={d.n_periods}"


def _load_panels(cfg: ExperimentConfig):
    p = cfg.panel
    x_range = (p.x_min, p.x_max) if p.x_min is not None else None
    train = load_panel(p.path, n_choices=p.n_choices, x_range=x_range)
    val = None
    if p.validation_path is not None:
        val = load_panel(p.validation_path, n_choices=train.n_choices, x_range=train.x_range)
    return train, val


def _data(cfg: ExperimentConfig, seed: int):
    """(train, validation or None, truth or None) for one round."""
    truth = None
    if cfg.dgp is not None:
        dgp = build_dgp(cfg, seed)
        truth = dgp.truth
        train = simulate(dgp)
        val = None
        if cfg.dgp.validation == "separate":
            val = simulate(dgp, np.arange(dgp.n_buses, 2 * dgp.n_buses))
    else:
        train, val = _load_panels(cfg)
    if val is None and cfg.tuning is not None:
        train, val = split_train_validation(train, cfg.tuning.validation_fraction, cfg.tuning.split_seed)
    return train, val, truth


def _estimate(cfg, train, disc, seed):
    e = cfg.estimator
    est = estimate_theta(train, disc, e.beta, e.model, tol=e.tolerance, gtol=e.gtol,
                         max_iter=e.max_iter, n_restarts=e.n_restarts, seed=seed)
    out = {"log_likelihood": est.log_likelihood}
    if e.model == "linear":
        out["c_m"] = est.c_m
        for i, v in enumerate(est.replacement_costs):
            out[f"rc_{i}"] = float(v)
    return out, est


def run_round(cfg: ExperimentConfig, r: int, base_seed: int | None = None, out_dir: Path | None = None):
    """Run every partitioner setting on round ``r``; returns (records, timings, failure or None)."""
    seed = round_seed(cfg.replication.base_seed if base_seed is None else base_seed, r)
    records, timings = [], []
    swept = cfg.partitioner.swept()

    def emit(label, metric, value):
        records.append({"round": r, "seed": seed, "setting": label, "metric": metric, "value": float(value)})

    try:
        train, val, truth = _data(cfg, seed)
        if out_dir is not None and truth is not None:
            (out_dir / "truth").mkdir(parents=True, exist_ok=True)
            truth.tree.save(out_dir / "truth" / f"round_{r:03d}.tree")
            (out_dir / "truth" / f"round_{r:03d}.json").write_text(truth.to_json())
        fitted = []
        for setting in cfg.partitioner.settings():
            hp = Hyperparameters(delta=cfg.partitioner.delta, **setting)
            label = setting_label(setting, swept)
            t0 = time.perf_counter()
            disc, _, _ = grow(train, hp)
            timings.append({"round": r, "setting": label, "step": "discretize", "seconds": time.perf_counter() - t0})
            score = validation_score(train, val, disc, hp.lambda_rel, hp.delta) if val is not None else None
            fitted.append((setting, label, hp, disc, score))

        rows = list(fitted)
        if cfg.tuning is not None:
            best = max(fitted, key=lambda f: (f[4], -fitted.index(f)))
            rows.append(({**best[0], "tuned": True}, "tuned", best[2], best[3], best[4]))

        for setting, label, hp, disc, score in rows:
            emit(label, "n_partitions", disc.n_leaves)
            if setting.get("tuned"):
                for k in ("max_partitions", "lambda_rel"):
                    emit(label, f"chosen_{k}", setting[k])
            if score is not None:
                emit(label, "score", score)
            pairs = matched_leaves(truth, disc, train) if truth is not None else {}
            if truth is not None:
                emit(label, "matched", len(pairs))
            if out_dir is not None:
                (out_dir / "trees").mkdir(parents=True, exist_ok=True)
                safe = label.replace(",", "_").replace("=", "")
                disc.save(out_dir / "trees" / f"round_{r:03d}_{safe}.tree")
            if cfg.estimator is not None and cfg.estimator.enabled:
                t0 = time.perf_counter()
                try:
                    vals, _ = _estimate(cfg, train, disc, seed)
                except EstimationError as exc:
                    vals, _ = {"log_likelihood": exc.best.log_likelihood}, exc.best
                    logger.warning("round %d %s: %s", r, label, exc)
                    emit(label, "estimation_failed", 1.0)
                    if exc.best is not None and cfg.estimator.model == "linear":
                        vals["c_m"] = exc.best.c_m
                        for i, v in enumerate(exc.best.replacement_costs):
                            vals[f"rc_{i}"] = float(v)
                timings.append({"round": r, "setting": label, "step": "estimate",
                                "seconds": time.perf_counter() - t0})
                for k, v in vals.items():
                    emit(label, k, v)
                # replacement costs of exactly recovered true partitions, indexed by the true leaf id
                for p, leaf in sorted(pairs.items()):
                    if f"rc_{leaf}" in vals:
                        emit(label, f"rc_true_{p}", vals[f"rc_{leaf}"])
        return records, timings, None
    except Exception as exc:  # a failed round is recorded and the run continues
        logger.exception("round %d failed", r)
        return records, timings, {"round": r, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}


def run_experiment(cfg: ExperimentConfig, *, seed: int | None = None, jobs: int | None = None,
                   out_dir=None) -> ResultTable:
    """Run all rounds (in parallel when ``jobs > 1``) and write artifacts if ``out_dir`` is set."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    n_jobs = jobs if jobs is not None else cfg.replication.jobs
    rounds = range(cfg.replication.n_rounds)
    if n_jobs == 1:
        parts = [run_round(cfg, r, seed, out) for r in rounds]
    else:
        parts = Parallel(n_jobs=n_jobs)(delayed(run_round)(cfg, r, seed, out) for r in rounds)
    records, timings, failures = [], [], []
    for rec, tim, fail in parts:
        records += rec
        timings += tim
        if fail:
            failures.append(fail)
    table = ResultTable(records, failures, dgp_label(cfg))
    if out is not None:
        write_artifacts(table, cfg, out, timings)
    return table


def write_artifacts(table: ResultTable, cfg: ExperimentConfig, out: Path, timings=()) -> None:
    o = cfg.output
    table.to_csv(out / "rounds.csv")
    agg = table.aggregate(o.bootstrap_resamples, o.bootstrap_seed)
    if "csv" in o.formats:
        with open(out / "aggregate.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["setting", "metric", "n", "mean", "lo", "hi"], lineterminator="\n")
            w.writeheader()
            for row in agg:
                w.writerow({**row, **{k: repr(row[k]) for k in ("mean", "lo", "hi")}})
    if "txt" in o.formats:
        (out / "report.txt").write_text(emit_report([table], o.bootstrap_resamples, o.bootstrap_seed))
    if timings:
        with open(out / "timings.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["round", "setting", "step", "seconds"], lineterminator="\n")
            w.writeheader()
            w.writerows(timings)
    if table.failures:
        with open(out / "failures.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["round", "seed", "error"], lineterminator="\n")
            w.writeheader()
            w.writerows(table.failures)
    (out / "meta.json").write_text(json.dumps({"label": table.label, "source": cfg.source}, indent=2))


def _fmt(x: float, digits: int) -> str:
    return "nan" if math.isnan(x) else f"{x:.{digits}f}"


def emit_report(tables, n_resamples: int = 1000, seed: int = 0, digits: int = 3) -> str:
    """Aligned text tables: one per metric, one row pair per result table.

    Columns are the partitioner settings; each row shows the mean and, under
    it, the 2%-98% bootstrap band.
    """
    tables = list(tables)
    metrics = list(dict.fromkeys(m for t in tables for m in t.metrics()))
    buf = io.StringIO()
    for metric in metrics:
        settings = list(dict.fromkeys(s for t in tables for s in t.settings()
                                      if t.values(s, metric)))
        if not settings:
            continue
        rows = []
        for t in tables:
            means, bands = [], []
            for s in settings:
                vals = t.values(s, metric)
                if not vals:
                    means.append("")
                    bands.append("")
                    continue
                m, lo, hi = bootstrap_band(vals, n_resamples, seed)
                means.append(_fmt(m, digits))
                bands.append(f"({_fmt(lo, digits)}, {_fmt(hi, digits)})")
            rows.append([t.label] + means)
            rows.append([""] + bands)
        header = ["data"] + settings
        widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
        line = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        buf.write(f"{metric}\n")
        buf.write(line(header).rstrip() + "\n")
        buf.write("-" * (sum(widths) + 2 * (len(widths) - 1)) + "\n")
        for r in rows:
            buf.write(line(r).rstrip() + "\n")
        buf.write("\n")
        n_rounds = {len(t.values(s, metric)) for t in tables for s in settings if t.values(s, metric)}
        if len(n_rounds) > 1:
            buf.write(f"(rounds per cell vary: {sorted(n_rounds)})\n\n")
    return buf.getvalue()


def load_truth(path) -> TruePartitionSpec:
    return TruePartitionSpec.from_json(Path(path).read_text())


def load_discretization(path) -> Discretization:
    return Discretization.load(path)


def as_panel(obj) -> Panel:
    return obj if isinstance(obj, Panel) else load_panel(obj)
