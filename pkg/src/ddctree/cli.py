"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 invalid input (config, panel or
tree files), 3 runtime failure (including failed experiment rounds).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import (
    ResultTable,
    _data,
    _estimate,
    dgp_label,
    emit_report,
    round_seed,
    run_experiment,
    setting_label,
)
from .panel import PanelError, write_panel
from .partitioner import Hyperparameters, grow, tune
from .simulator import simulate
from .tree import Discretization, TreeFormatError

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3

logger = logging.getLogger("ddctree")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", required=True, type=Path, help="YAML experiment config")
    p.add_argument("--seed", type=int, help="override replication.base_seed")
    p.add_argument("--jobs", type=int, help="override replication.jobs")
    p.add_argument("--out", type=Path, help="output directory (default: output.directory)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ddctree", description="Discretize covariates for dynamic discrete choice and estimate by NFXP.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "simulate": "simulate a panel (and its true discretization) from the dgp block",
        "discretize": "grow one tree per partitioner setting",
        "tune": "pick the partitioner setting with the best validation score",
        "estimate": "estimate utility parameters by nested fixed point",
        "experiment": "run Monte Carlo rounds and write per-round and aggregate tables",
    }
    for name, h in helps.items():
        _common(sub.add_parser(name, help=h))
    rp = sub.add_parser("report", help="rebuild report tables from finished experiment directories")
    rp.add_argument("results", nargs="+", type=Path, help="experiment output directories")
    rp.add_argument("--config", type=Path, help="config supplying bootstrap settings")
    rp.add_argument("--seed", type=int, help="bootstrap seed")
    rp.add_argument("--jobs", type=int, help="ignored; accepted for uniformity")
    rp.add_argument("--out", type=Path, help="directory for report.txt (default: print only)")
    rp.add_argument("-v", "--verbose", action="store_true")
    return ap


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = args.out or cfg.output.directory
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg):
    return round_seed(args.seed if args.seed is not None else cfg.replication.base_seed, 0)


def _needs_data(cfg):
    if cfg.dgp is None and cfg.panel is None:
        raise ConfigError(f"{cfg.source}:1: need a dgp block or a panel block")


def cmd_simulate(args, cfg):
    if cfg.dgp is None:
        raise ConfigError(f"{cfg.source}:1: simulate needs a dgp block")
    out = _out_dir(args, cfg)
    from .experiment import build_dgp

    dgp = build_dgp(cfg, _seed(args, cfg))
    panel = simulate(dgp)
    write_panel(panel, out / "panel.csv")
    if cfg.dgp.validation == "separate":
        import numpy as np

        write_panel(simulate(dgp, np.arange(dgp.n_buses, 2 * dgp.n_buses)), out / "validation.csv")
    dgp.truth.tree.save(out / "truth.tree")
    (out / "truth.json").write_text(dgp.truth.to_json())
    print(f"wrote {panel.n_obs} observations ({panel.n_agents} buses) to {out / 'panel.csv'}")
    return EXIT_OK


def cmd_discretize(args, cfg):
    _needs_data(cfg)
    out = _out_dir(args, cfg)
    train, _, _ = _data(cfg, _seed(args, cfg))
    swept = cfg.partitioner.swept()
    for setting in cfg.partitioner.settings():
        label = setting_label(setting, swept)
        disc, trace, lam_adj = grow(train, Hyperparameters(delta=cfg.partitioner.delta, **setting))
        stem = "discretization" if not swept else "discretization_" + label.replace(",", "_").replace("=", "")
        disc.save(out / f"{stem}.tree")
        with open(out / f"{stem}_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "leaf", "dim", "threshold", "gain", "delta_f_dc", "delta_f_tr", "f_dc", "f_tr", "combined"])
            for i, rec in enumerate(trace, 1):
                w.writerow([i, rec.leaf, rec.dim, repr(rec.threshold), repr(rec.gain), repr(rec.delta_f_dc),
                            repr(rec.delta_f_tr), repr(rec.f_dc), repr(rec.f_tr), repr(rec.combined)])
        print(f"{label}: {disc.n_leaves} partitions, lambda_adj={lam_adj:.6g} -> {out / (stem + '.tree')}")
    return EXIT_OK


def cmd_tune(args, cfg):
    _needs_data(cfg)
    out = _out_dir(args, cfg)
    train, val, _ = _data(cfg, _seed(args, cfg))
    if val is None:
        raise ConfigError(
            f"{cfg.source}:1: tune needs validation data (tuning block, panel.validation_path or dgp.validation: separate)"
        )
    grid = [Hyperparameters(delta=cfg.partitioner.delta, **s) for s in cfg.partitioner.settings()]
    result = tune(train, val, grid)
    with open(out / "tuning.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, list(result.table[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(result.table)
    result.discretization.save(out / "best.tree")
    print(f"best: lambda_rel={result.best.lambda_rel:g} max_partitions={result.best.max_partitions} "
          f"score={result.score:.6g} ({result.discretization.n_leaves} partitions)")
    return EXIT_OK


def cmd_estimate(args, cfg):
    _needs_data(cfg)
    if cfg.estimator is None:
        raise ConfigError(f"{cfg.source}:1: estimate needs an estimator block")
    out = _out_dir(args, cfg)
    seed = _seed(args, cfg)
    train, _, _ = _data(cfg, seed)
    if cfg.panel is not None and cfg.panel.discretization is not None:
        disc = Discretization.load(cfg.panel.discretization)
        if disc.n_dims is not None and disc.n_dims != train.n_dims:
            raise ConfigError(f"{cfg.panel.discretization}: tree expects {disc.n_dims} covariates, "
                              f"panel has {train.n_dims}")
    else:
        setting = cfg.partitioner.settings()[0]
        disc, _, _ = grow(train, Hyperparameters(delta=cfg.partitioner.delta, **setting))
    _, est = _estimate(cfg, train, disc, seed)
    rows = est.summary_rows()
    with open(out / "estimates.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["parameter", "estimate", "std_error"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    lines = [f"data: {dgp_label(cfg)}", f"partitions: {disc.n_leaves}", f"beta: {est.beta}",
             f"log-likelihood: {est.log_likelihood:.6f}", f"iterations: {est.n_iter}",
             f"gradient sup-norm: {est.gradient_norm:.3g}",
             f"imputed transition origins: {len(est.imputed_origins)}", ""]
    width = max(len("parameter"), *(len(r["parameter"]) for r in rows))
    lines.append(f"{'parameter'.ljust(width)}  {'estimate':>12}  {'std.err':>10}")
    for r in rows:
        lines.append(f"{r['parameter'].ljust(width)}  {r['estimate']:12.6f}  {r['std_error']:10.6f}")
    text = "\n".join(lines) + "\n"
    (out / "estimates.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_experiment(args, cfg):
    _needs_data(cfg)
    out = _out_dir(args, cfg)
    table = run_experiment(cfg, seed=args.seed, jobs=args.jobs, out_dir=out)
    if "txt" in cfg.output.formats:
        print((out / "report.txt").read_text(), end="")
    if table.failures:
        for f in table.failures:
            print(f"round {f['round']} failed: {f['error']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args):
    n_res, bseed = 1000, 0
    if args.config is not None:
        cfg = load_config(args.config)
        n_res, bseed = cfg.output.bootstrap_resamples, cfg.output.bootstrap_seed
    if args.seed is not None:
        bseed = args.seed
    tables = []
    for d in args.results:
        path = d / "rounds.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path}: no rounds.csv (run `ddctree experiment` first)")
        meta = d / "meta.json"
        label = json.loads(meta.read_text())["label"] if meta.exists() else d.name
        tables.append(ResultTable.from_csv(path, label))
    text = emit_report(tables, n_res, bseed)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "discretize": cmd_discretize,
    "tune": cmd_tune,
    "estimate": cmd_estimate,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args)
        if args.jobs is not None and args.jobs < 1:
            print("ddctree: error: --jobs must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, PanelError, TreeFormatError, FileNotFoundError) as exc:
        print(f"ddctree: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"ddctree: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
