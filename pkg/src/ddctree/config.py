"""Experiment configuration files (YAML) with line-precise validation errors.

A config has up to seven top-level blocks::

    dgp:          # simulated data (or use `panel:` for a CSV on disk)
    panel:
    partitioner:  # scalar or list values; lists are swept
    tuning:       # optional grid search on a validation set
    estimator:
    replication:
    output:

See README.md for every field.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

__all__ = [
    "ConfigError",
    "DgpBlock",
    "PanelBlock",
    "PartitionerBlock",
    "TuningBlock",
    "EstimatorBlock",
    "ReplicationBlock",
    "OutputBlock",
    "ExperimentConfig",
    "load_config",
    "parse_config",
]


class ConfigError(ValueError):
    """Invalid configuration; the message starts with ``<file>:<line>:``."""


class _Doc:
    """Parsed YAML plus the source line of every key path."""

    def __init__(self, text: str, source: str):
        self.source = source
        self.lines: dict = {}
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
            self.data = yaml.safe_load(text)
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark or exc.context_mark
            line = mark.line + 1 if mark else 0
            raise ConfigError(f"{source}:{line}: invalid YAML: {exc.problem}") from None
        if node is not None:
            self._walk(node, ())
        if self.data is None:
            self.data = {}

    def _walk(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                self.lines[path + (k.value,)] = k.start_mark.line + 1
                self._walk_child(v, path + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, path + (i,))

    def _walk_child(self, node, path):
        line = self.lines[path]
        self._walk(node, path)
        # keep the key's own line for scalars so errors point at `key: value`
        if isinstance(node, yaml.ScalarNode):
            self.lines[path] = line

    def line(self, path) -> int:
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path, 1)

    def error(self, path, msg) -> ConfigError:
        where = ".".join(str(p) for p in path) or "<root>"
        return ConfigError(f"{self.source}:{self.line(path)}: {where}: {msg}")


class _Block:
    """Typed reader over one mapping of the config."""

    def __init__(self, doc: _Doc, path: tuple, allowed):
        self.doc, self.path = doc, path
        raw = doc.data
        for p in path:
            raw = raw.get(p) if isinstance(raw, dict) else None
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise doc.error(path, "expected a mapping")
        self.raw = raw
        for key in raw:
            if key not in allowed:
                raise doc.error(path + (key,), f"unknown key {key!r}; allowed: {', '.join(sorted(allowed))}")

    def _get(self, key, required, default):
        if key not in self.raw:
            if required:
                raise self.doc.error(self.path, f"missing required key {key!r}")
            return default, False
        if self.raw[key] is None and not required and default is None:
            return None, False  # explicit null for an optional key
        return self.raw[key], True

    def _err(self, key, msg):
        return self.doc.error(self.path + (key,), msg)

    def number(self, key, *, required=False, default=None, integer=False, lo=None, hi=None,
               lo_open=False, hi_open=False):
        v, present = self._get(key, required, default)
        if not present:
            return v
        return self._check_number(key, v, integer, lo, hi, lo_open, hi_open)

    def _check_number(self, key, v, integer, lo, hi, lo_open, hi_open):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise self._err(key, f"expected a number, got {v!r}")
        if integer:
            if isinstance(v, float) and not v.is_integer():
                raise self._err(key, f"expected an integer, got {v!r}")
            v = int(v)
        else:
            v = float(v)
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise self._err(key, f"must be {'>' if lo_open else '>='} {lo}, got {v}")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            raise self._err(key, f"must be {'<' if hi_open else '<='} {hi}, got {v}")
        return v

    def number_list(self, key, *, required=False, default=None, **kw):
        """A number or a nonempty list of numbers, returned as a list."""
        v, present = self._get(key, required, default)
        if not present:
            return v
        items = v if isinstance(v, list) else [v]
        if not items:
            raise self._err(key, "list must not be empty")
        kw = {"integer": False, "lo": None, "hi": None, "lo_open": False, "hi_open": False, **kw}
        return [self._check_number(key, x, **kw) for x in items]

    def boolean(self, key, *, required=False, default=None):
        v, present = self._get(key, required, default)
        if present and not isinstance(v, bool):
            raise self._err(key, f"expected true or false, got {v!r}")
        return v

    def choice(self, key, options, *, required=False, default=None):
        v, present = self._get(key, required, default)
        if present and v not in options:
            raise self._err(key, f"expected one of {', '.join(map(str, options))}, got {v!r}")
        return v

    def string(self, key, *, required=False, default=None):
        v, present = self._get(key, required, default)
        if present and not isinstance(v, str):
            raise self._err(key, f"expected a string, got {v!r}")
        return v

    def path_value(self, key, base: Path, *, required=False, must_exist=True):
        v = self.string(key, required=required)
        if v is None:
            return None
        p = Path(v)
        if not p.is_absolute():
            p = base / p
        if must_exist and not p.exists():
            raise self._err(key, f"file not found: {p}")
        return p


@dataclass(frozen=True)
class DgpBlock:
    study: int
    q_transition: str
    n_buses: int
    n_periods: int
    c_m: float
    beta: float
    dissimilar_costs: bool = True
    dissimilar_transitions: bool = True
    n_dims: int = 10
    n_splits: int = 14
    relevant_dims: int = 10
    total_dims: int = 30
    replace_floor: int = 1
    x_init: int = 1
    mileage_steps: tuple | None = None
    validation: str = "none"
    tolerance: float = 1e-10


@dataclass(frozen=True)
class PanelBlock:
    path: Path
    validation_path: Path | None = None
    discretization: Path | None = None
    n_choices: int | None = None
    x_min: int | None = None
    x_max: int | None = None


@dataclass(frozen=True)
class PartitionerBlock:
    max_partitions: list = field(default_factory=lambda: [10])
    min_observations: list = field(default_factory=lambda: [1])
    min_lift: list = field(default_factory=lambda: [1e-10])
    lambda_rel: list = field(default_factory=lambda: [1.0])
    delta: float = 1e-5

    def settings(self) -> list[dict]:
        """Cartesian product of the swept values, in file order."""
        keys = ("max_partitions", "min_observations", "min_lift", "lambda_rel")
        return [dict(zip(keys, vals)) for vals in itertools.product(*(getattr(self, k) for k in keys))]

    def swept(self) -> list[str]:
        keys = ("max_partitions", "min_observations", "min_lift", "lambda_rel")
        return [k for k in keys if len(getattr(self, k)) > 1]


@dataclass(frozen=True)
class TuningBlock:
    validation_fraction: float = 0.2
    split_seed: int = 0


@dataclass(frozen=True)
class EstimatorBlock:
    beta: float
    tolerance: float
    gtol: float
    model: str = "linear"
    n_restarts: int = 3
    max_iter: int = 1000
    enabled: bool = True


@dataclass(frozen=True)
class ReplicationBlock:
    n_rounds: int = 1
    base_seed: int = 0
    jobs: int = 1


@dataclass(frozen=True)
class OutputBlock:
    directory: Path = Path("results")
    formats: tuple = ("csv", "txt")
    bootstrap_resamples: int = 1000
    bootstrap_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    source: str
    dgp: DgpBlock | None
    panel: PanelBlock | None
    partitioner: PartitionerBlock
    tuning: TuningBlock | None
    estimator: EstimatorBlock | None
    replication: ReplicationBlock
    output: OutputBlock


_TOP = {"dgp", "panel", "partitioner", "tuning", "estimator", "replication", "output"}


def parse_config(text: str, source: str = "<config>", base: Path | None = None) -> ExperimentConfig:
    """Validate ``text`` and build an :class:`ExperimentConfig`."""
    doc = _Doc(text, source)
    if not isinstance(doc.data, dict):
        raise doc.error((), "top level must be a mapping")
    _Block(doc, (), _TOP)
    base = base or Path.cwd()

    dgp = None
    if "dgp" in doc.data:
        b = _Block(doc, ("dgp",), {
            "study", "q_transition", "n_buses", "n_periods", "c_m", "beta", "dissimilar_costs",
            "dissimilar_transitions", "n_dims", "n_splits", "relevant_dims", "total_dims",
            "replace_floor", "x_init", "mileage_steps", "validation", "tolerance",
        })
        dgp = DgpBlock(
            study=b.choice("study", (1, 2), required=True),
            q_transition=b.choice("q_transition", ("none", "random", "sparse"), required=True),
            n_buses=b.number("n_buses", required=True, integer=True, lo=1),
            n_periods=b.number("n_periods", required=True, integer=True, lo=1),
            c_m=b.number("c_m", required=True),
            beta=b.number("beta", required=True, lo=0.0, hi=1.0, hi_open=True),
            dissimilar_costs=b.boolean("dissimilar_costs", default=True),
            dissimilar_transitions=b.boolean("dissimilar_transitions", default=True),
            n_dims=b.number("n_dims", default=10, integer=True, lo=2),
            n_splits=b.number("n_splits", default=14, integer=True, lo=0),
            relevant_dims=b.number("relevant_dims", default=10, integer=True, lo=1),
            total_dims=b.number("total_dims", default=30, integer=True, lo=1),
            replace_floor=b.number("replace_floor", default=1, integer=True, lo=0),
            x_init=b.number("x_init", default=1, integer=True, lo=0, hi=20),
            mileage_steps=b.number_list("mileage_steps", integer=True, lo=0, hi=3),
            validation=b.choice("validation", ("none", "separate"), default="none"),
            tolerance=b.number("tolerance", default=1e-10, lo=0.0, lo_open=True),
        )
        if dgp.mileage_steps is not None:
            if dgp.study != 1 or len(dgp.mileage_steps) != 4:
                raise doc.error(("dgp", "mileage_steps"), "needs study 1 and exactly four entries")
            dgp = replace(dgp, mileage_steps=tuple(dgp.mileage_steps))
        if dgp.relevant_dims > dgp.total_dims:
            raise doc.error(("dgp", "relevant_dims"), "must not exceed total_dims")

    panel = None
    if "panel" in doc.data:
        b = _Block(doc, ("panel",), {"path", "validation_path", "discretization", "n_choices", "x_min", "x_max"})
        panel = PanelBlock(
            path=b.path_value("path", base, required=True),
            validation_path=b.path_value("validation_path", base),
            discretization=b.path_value("discretization", base),
            n_choices=b.number("n_choices", integer=True, lo=2),
            x_min=b.number("x_min", integer=True),
            x_max=b.number("x_max", integer=True),
        )
        if (panel.x_min is None) != (panel.x_max is None):
            raise doc.error(("panel",), "give both x_min and x_max or neither")
    if dgp is not None and panel is not None:
        raise doc.error(("panel",), "use either a dgp block or a panel block, not both")

    b = _Block(doc, ("partitioner",), {"max_partitions", "min_observations", "min_lift", "lambda_rel", "delta"})
    partitioner = PartitionerBlock(
        max_partitions=b.number_list("max_partitions", default=[10], integer=True, lo=1),
        min_observations=b.number_list("min_observations", default=[1], integer=True, lo=1),
        min_lift=b.number_list("min_lift", default=[1e-10], lo=0.0),
        lambda_rel=b.number_list("lambda_rel", default=[1.0], lo=0.0),
        delta=b.number("delta", default=1e-5, lo=0.0),
    )

    tuning = None
    if "tuning" in doc.data:
        b = _Block(doc, ("tuning",), {"validation_fraction", "split_seed"})
        tuning = TuningBlock(
            validation_fraction=b.number("validation_fraction", default=0.2, lo=0.0, hi=1.0,
                                         lo_open=True, hi_open=True),
            split_seed=b.number("split_seed", default=0, integer=True),
        )

    estimator = None
    if "estimator" in doc.data:
        b = _Block(doc, ("estimator",), {"beta", "tolerance", "gtol", "model", "n_restarts", "max_iter", "enabled"})
        estimator = EstimatorBlock(
            beta=b.number("beta", required=True, lo=0.0, hi=1.0, hi_open=True),
            tolerance=b.number("tolerance", required=True, lo=0.0, lo_open=True),
            gtol=b.number("gtol", required=True, lo=0.0, lo_open=True),
            model=b.choice("model", ("linear", "nonparametric"), default="linear"),
            n_restarts=b.number("n_restarts", default=3, integer=True, lo=1),
            max_iter=b.number("max_iter", default=1000, integer=True, lo=1),
            enabled=b.boolean("enabled", default=True),
        )

    b = _Block(doc, ("replication",), {"n_rounds", "base_seed", "jobs"})
    replication = ReplicationBlock(
        n_rounds=b.number("n_rounds", default=1, integer=True, lo=1),
        base_seed=b.number("base_seed", default=0, integer=True, lo=0),
        jobs=b.number("jobs", default=1, integer=True, lo=1),
    )

    b = _Block(doc, ("output",), {"directory", "formats", "bootstrap_resamples", "bootstrap_seed"})
    fmts = b.raw.get("formats", ["csv", "txt"])
    if not isinstance(fmts, list) or not fmts or any(f not in ("csv", "txt") for f in fmts):
        raise doc.error(("output", "formats"), "expected a nonempty list drawn from [csv, txt]")
    directory = b.string("directory", default="results")
    output = OutputBlock(
        directory=Path(directory) if Path(directory).is_absolute() else base / directory,
        formats=tuple(fmts),
        bootstrap_resamples=b.number("bootstrap_resamples", default=1000, integer=True, lo=1),
        bootstrap_seed=b.number("bootstrap_seed", default=0, integer=True, lo=0),
    )
    return ExperimentConfig(source, dgp, panel, partitioner, tuning, estimator, replication, output)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    return parse_config(path.read_text(), str(path), path.parent)
