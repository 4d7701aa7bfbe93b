"""Panel data: ingestion, agent-level splitting and occurrence counts.

A panel stores one row per (agent, period) with a low-dimensional integer
state ``x``, a real covariate vector ``q`` and a discrete decision ``d``.
Rows are kept sorted by (agent, period); periods within an agent must be
consecutive so that row ``i`` and row ``i + 1`` form a transition whenever
they belong to the same agent.
"""

from __future__ import annotations

import csv
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "PanelError",
    "SchemaError",
    "PanelValidationError",
    "PanelParseError",
    "Observation",
    "Panel",
    "CountTables",
    "load_panel",
    "write_panel",
    "split_train_validation",
    "count_tables",
    "DEFAULT_SCHEMA",
]


class PanelError(ValueError):
    """Base class for panel construction and ingestion failures."""


class SchemaError(PanelError):
    """A required column is missing from the input file."""


class PanelValidationError(PanelError):
    """The panel violates a structural invariant (gaps, duplicates, ranges)."""


class PanelParseError(PanelError):
    """A cell could not be parsed as a number."""


DEFAULT_SCHEMA: dict[str, str] = {
    "agent": "agent",
    "period": "period",
    "x": "x",
    "d": "d",
    "q_prefix": "q",
}


@dataclass(frozen=True)
class Observation:
    agent_id: int
    period: int
    x: int
    q: tuple[float, ...]
    decision: int


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Panel:
    """Immutable panel of (x, q, d) observations grouped by agent.

    Parameters
    ----------
    agent, period, x, d : ndarray of int, shape (n_obs,)
        Agent identifier, 1-based period, observed state and decision.
    q : ndarray of float, shape (n_obs, n_dims)
        High-dimensional covariates.
    n_choices : int, optional
        Number of alternatives ``J``. Defaults to ``max(d) + 1``.
    x_range : (int, int), optional
        Inclusive range of admissible ``x`` values. Defaults to the
        observed minimum and maximum.

    Rows are re-sorted by (agent, period) on construction.
    """

    agent: np.ndarray
    period: np.ndarray
    x: np.ndarray
    d: np.ndarray
    q: np.ndarray
    n_choices: int | None = None
    x_range: tuple[int, int] | None = None
    successor: np.ndarray = field(init=False, repr=False)
    predecessor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        agent = np.asarray(self.agent, dtype=np.int64).ravel()
        period = np.asarray(self.period, dtype=np.int64).ravel()
        x = np.asarray(self.x, dtype=np.int64).ravel()
        d = np.asarray(self.d, dtype=np.int64).ravel()
        q = np.asarray(self.q, dtype=np.float64)
        n = agent.shape[0]
        if q.ndim == 1:
            q = q.reshape(n, -1) if n else q.reshape(0, 0)
        if not (period.shape[0] == x.shape[0] == d.shape[0] == q.shape[0] == n):
            raise PanelValidationError("agent, period, x, d and q must have the same number of rows")
        if q.ndim != 2:
            raise PanelValidationError("q must be two-dimensional (n_obs, n_dims)")
        if n and not np.all(np.isfinite(q)):
            raise PanelValidationError("q contains non-finite values")

        order = np.lexsort((period, agent))
        agent, period, x, d, q = agent[order], period[order], x[order], d[order], q[order]

        same = agent[1:] == agent[:-1]
        if np.any(same & (period[1:] == period[:-1])):
            i = int(np.flatnonzero(same & (period[1:] == period[:-1]))[0])
            raise PanelValidationError(
                f"duplicate (agent, period) = ({agent[i]}, {period[i]})"
            )
        gap = same & (period[1:] != period[:-1] + 1)
        if np.any(gap):
            a = int(agent[int(np.flatnonzero(gap)[0])])
            raise PanelValidationError(f"agent {a} has non-consecutive periods")
        if n and np.any(d < 0):
            raise PanelValidationError("decisions must be non-negative integers")

        n_choices = self.n_choices
        if n_choices is None:
            n_choices = int(d.max()) + 1 if n else 1
        if n and d.max() >= n_choices:
            raise PanelValidationError(f"decision {int(d.max())} outside 0..{n_choices - 1}")

        x_range = self.x_range
        if x_range is None:
            x_range = (int(x.min()), int(x.max())) if n else (0, 0)
        x_range = (int(x_range[0]), int(x_range[1]))
        if x_range[1] < x_range[0]:
            raise PanelValidationError(f"empty x_range {x_range}")
        if n and (x.min() < x_range[0] or x.max() > x_range[1]):
            raise PanelValidationError(f"x outside declared range {x_range}")

        succ = np.full(n, -1, dtype=np.int64)
        pred = np.full(n, -1, dtype=np.int64)
        idx = np.flatnonzero(same)
        succ[idx] = idx + 1
        pred[idx + 1] = idx

        set_ = object.__setattr__
        set_(self, "agent", _readonly(agent))
        set_(self, "period", _readonly(period))
        set_(self, "x", _readonly(x))
        set_(self, "d", _readonly(d))
        set_(self, "q", _readonly(q))
        set_(self, "n_choices", int(n_choices))
        set_(self, "x_range", x_range)
        set_(self, "successor", _readonly(succ))
        set_(self, "predecessor", _readonly(pred))

    @property
    def n_obs(self) -> int:
        return int(self.agent.shape[0])

    @property
    def n_dims(self) -> int:
        return int(self.q.shape[1])

    @property
    def n_x(self) -> int:
        return self.x_range[1] - self.x_range[0] + 1

    @property
    def agents(self) -> np.ndarray:
        return np.unique(self.agent)

    @property
    def n_agents(self) -> int:
        return int(self.agents.shape[0])

    @property
    def n_periods(self) -> int:
        """Longest agent history."""
        if self.n_obs == 0:
            return 0
        _, counts = np.unique(self.agent, return_counts=True)
        return int(counts.max())

    @property
    def n_transitions(self) -> int:
        return int(np.count_nonzero(self.successor >= 0))

    @property
    def x_index(self) -> np.ndarray:
        """``x`` shifted to 0-based offsets inside ``x_range``."""
        return self.x - self.x_range[0]

    def __len__(self) -> int:
        return self.n_obs

    def __iter__(self) -> Iterator[Observation]:
        for i in range(self.n_obs):
            yield Observation(
                int(self.agent[i]),
                int(self.period[i]),
                int(self.x[i]),
                tuple(float(v) for v in self.q[i]),
                int(self.d[i]),
            )

    def select_agents(self, agents) -> Panel:
        """Sub-panel holding the whole trajectories of ``agents``."""
        mask = np.isin(self.agent, np.asarray(agents, dtype=np.int64))
        return self.subset(mask)

    def subset(self, mask) -> Panel:
        return Panel(
            self.agent[mask],
            self.period[mask],
            self.x[mask],
            self.d[mask],
            self.q[mask],
            n_choices=self.n_choices,
            x_range=self.x_range,
        )

    def with_q(self, q) -> Panel:
        """Same panel with the covariate matrix replaced."""
        return Panel(
            self.agent, self.period, self.x, self.d, q,
            n_choices=self.n_choices, x_range=self.x_range,
        )


def _parse_int(value: str, row: int, column: str) -> int:
    try:
        f = float(value)
    except ValueError:
        raise PanelParseError(f"row {row}: column {column!r}: non-numeric value {value!r}") from None
    if not f.is_integer():
        raise PanelParseError(f"row {row}: column {column!r}: expected an integer, got {value!r}")
    return int(f)


def load_panel(
    source,
    schema: Mapping[str, str] | None = None,
    *,
    n_choices: int | None = None,
    x_range: tuple[int, int] | None = None,
) -> Panel:
    """Read a headered CSV file into a :class:`Panel`.

    The default layout is ``agent,period,x,d,q1,...,qD``. ``schema`` can
    rename any of ``agent``, ``period``, ``x``, ``d`` and the covariate
    prefix ``q_prefix``; covariate columns are ``<prefix>1 .. <prefix>D``
    and must be contiguous from 1.

    Row numbers in error messages count the header as row 1.
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    path = Path(source)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        pos = {name: i for i, name in enumerate(header)}
        for key in ("agent", "period", "x", "d"):
            if cols[key] not in pos:
                raise SchemaError(f"{path}: missing column {cols[key]!r}")
        prefix = cols["q_prefix"]
        q_cols = []
        while f"{prefix}{len(q_cols) + 1}" in pos:
            q_cols.append(pos[f"{prefix}{len(q_cols) + 1}"])
        if not q_cols:
            raise SchemaError(f"{path}: missing covariate column {prefix + '1'!r}")
        int_cols = [(cols[k], pos[cols[k]]) for k in ("agent", "period", "x", "d")]

        ints, qs = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelParseError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            ints.append([_parse_int(row[i], row_no, name) for name, i in int_cols])
            qrow = []
            for j, i in enumerate(q_cols, start=1):
                try:
                    qrow.append(float(row[i]))
                except ValueError:
                    raise PanelParseError(
                        f"row {row_no}: column {prefix}{j!s}: non-numeric value {row[i]!r}"
                    ) from None
            qs.append(qrow)

    a = np.asarray(ints, dtype=np.int64).reshape(-1, 4)
    q = np.asarray(qs, dtype=np.float64).reshape(-1, len(q_cols))
    return Panel(a[:, 0], a[:, 1], a[:, 2], a[:, 3], q, n_choices=n_choices, x_range=x_range)


def write_panel(panel: Panel, path) -> None:
    """Write ``panel`` in the canonical CSV layout.

    Floats are written with ``repr`` so that :func:`load_panel` recovers them
    bit for bit.
    """
    header = ["agent", "period", "x", "d"] + [f"q{i}" for i in range(1, panel.n_dims + 1)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(panel.n_obs):
            w.writerow(
                [int(panel.agent[i]), int(panel.period[i]), int(panel.x[i]), int(panel.d[i])]
                + [repr(float(v)) for v in panel.q[i]]
            )


def split_train_validation(panel: Panel, validation_fraction: float, seed: int) -> tuple[Panel, Panel]:
    """Assign whole agents to a training or a validation panel.

    The validation side receives ``round(fraction * n_agents)`` agents,
    clipped so that both sides keep at least one agent.
    """
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError(f"validation_fraction must lie in (0, 1), got {validation_fraction}")
    agents = panel.agents
    if agents.shape[0] < 2:
        raise ValueError("need at least two agents to split")
    n_val = int(round(validation_fraction * agents.shape[0]))
    n_val = min(max(n_val, 1), agents.shape[0] - 1)
    rng = np.random.default_rng(seed)
    val_agents = np.sort(rng.choice(agents, size=n_val, replace=False))
    is_val = np.isin(panel.agent, val_agents)
    return panel.subset(~is_val), panel.subset(is_val)


@dataclass(frozen=True)
class CountTables:
    """Occurrence counts for one panel under one discretization.

    Keys are tuples; an absent key means a zero count.

    n_state : {(x, pi): count}
    n_state_choice : {(x, pi, j): count}
    n_transition : {(x_from, pi_from, j, x_to, pi_to): count}
        Moves out of (x_from, pi_from) under choice j into (x_to, pi_to).
    n_origin_choice : {(x_from, pi_from, j): count}
        Like ``n_state_choice`` but restricted to rows that have a successor.
    """

    n_state: dict
    n_state_choice: dict
    n_transition: dict
    n_origin_choice: dict
    n_decisions: int
    n_transitions: int
    n_choices: int
    n_x: int
    n_partitions: int
    x_min: int = 0


def _tally(*cols: np.ndarray) -> dict:
    if cols[0].shape[0] == 0:
        return {}
    keys, counts = np.unique(np.column_stack(cols), axis=0, return_counts=True)
    return {tuple(int(v) for v in k): int(c) for k, c in zip(keys, counts)}


def count_tables(panel: Panel, disc) -> CountTables:
    """Tabulate N(x, pi), N(x, pi, j), N(x', pi', j) and N(x', pi', j -> x, pi).

    ``disc`` is a :class:`~ddctree.tree.Discretization` or an integer array of
    precomputed partition labels, one per row of ``panel``.
    """
    if hasattr(disc, "apply"):
        if disc.n_dims is not None and disc.n_dims != panel.n_dims:
            raise ValueError(
                f"discretization expects {disc.n_dims} covariates, panel has {panel.n_dims}"
            )
        labels = disc.apply(panel.q)
        k = disc.n_leaves
    else:
        labels = np.asarray(disc, dtype=np.int64)
        if labels.shape != (panel.n_obs,):
            raise ValueError("label vector must have one entry per observation")
        k = int(labels.max()) + 1 if labels.size else 1
    x, d = panel.x, panel.d
    src = np.flatnonzero(panel.successor >= 0)
    dst = panel.successor[src]
    return CountTables(
        n_state=_tally(x, labels),
        n_state_choice=_tally(x, labels, d),
        n_transition=_tally(x[src], labels[src], d[src], x[dst], labels[dst]),
        n_origin_choice=_tally(x[src], labels[src], d[src]),
        n_decisions=panel.n_obs,
        n_transitions=int(src.shape[0]),
        n_choices=panel.n_choices,
        n_x=panel.n_x,
        n_partitions=int(k),
        x_min=int(panel.x_range[0]),
    )
