"""Nonparametric split objective, its weighting, and the validation score.

All functions take :class:`~ddctree.panel.CountTables` and treat
``0 * log 0`` as 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .panel import CountTables

__all__ = [
    "DegenerateDataError",
    "ObjectiveValue",
    "SmoothingConfig",
    "f_dc",
    "f_tr",
    "lambda_adj",
    "objective",
    "score",
]


class DegenerateDataError(ValueError):
    """The transition log-likelihood at the root is zero, so it cannot be rescaled."""


@dataclass(frozen=True)
class ObjectiveValue:
    f_dc: float
    f_tr: float
    lambda_adj: float
    lambda_rel: float

    @property
    def combined(self) -> float:
        return self.f_dc + self.lambda_adj * self.lambda_rel * self.f_tr


@dataclass(frozen=True)
class SmoothingConfig:
    """Additive smoothing: every possible outcome is assumed seen ``delta`` times."""

    delta: float = 1e-5

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")


def f_dc(counts: CountTables) -> float:
    """Decision log-likelihood: sum of N(x,pi,j) log(N(x,pi,j) / N(x,pi))."""
    n_state = counts.n_state
    total = 0.0
    for (x, p, _j), n in counts.n_state_choice.items():
        if n > 0:
            total += n * math.log(n / n_state[(x, p)])
    return total


def f_tr(counts: CountTables) -> float:
    """Transition log-likelihood.

    Sum over observed moves of N log(N / (N(x,pi) * N(x',pi',j))) where
    (x',pi',j) is the origin and (x,pi) the destination.
    """
    n_state = counts.n_state
    n_origin = counts.n_origin_choice
    total = 0.0
    for (xo, po, j, xd, pd), n in counts.n_transition.items():
        if n > 0:
            total += n * math.log(n / (n_state[(xd, pd)] * n_origin[(xo, po, j)]))
    return total


def lambda_adj(counts_at_root: CountTables) -> float:
    """Scale factor F_dc / F_tr evaluated on the one-partition discretization.

    Both parts are nonpositive, so the absolute ratio is returned.
    """
    fd = f_dc(counts_at_root)
    ft = f_tr(counts_at_root)
    if ft == 0.0:
        raise DegenerateDataError(
            "transition log-likelihood is zero at the root; set lambda_rel = 0"
        )
    return abs(fd / ft)


def objective(counts: CountTables, lambda_rel: float, lambda_adj: float) -> ObjectiveValue:
    if lambda_rel < 0 or lambda_adj < 0:
        raise ValueError("lambda_rel and lambda_adj must be nonnegative")
    return ObjectiveValue(f_dc(counts), f_tr(counts), float(lambda_adj), float(lambda_rel))


def _log_ratio(num: float, den: float) -> float:
    if num <= 0.0:
        return -math.inf
    return math.log(num / den)


def score(
    train_counts: CountTables,
    val_counts: CountTables,
    lambda_rel: float,
    lambda_adj_val: float,
    smoothing: SmoothingConfig | None = None,
) -> float:
    """Out-of-sample objective: validation weights, training probabilities.

    Trained probabilities are additively smoothed: each choice probability is
    (N(x,pi,j) + delta) / (N(x,pi) + delta J) and each transition probability
    (N + delta) / (N(x',pi',j) + delta |X| k). The within-partition
    point-mass 1 / N(x,pi) of the destination uses the smoothed state count
    N(x,pi) + delta J.

    Returns ``-inf`` if ``delta == 0`` and some validation event never occurs
    in training. The result is scaled by 1 / (1 + lambda_rel).
    """
    if lambda_rel < 0:
        raise ValueError("lambda_rel must be nonnegative")
    delta = (smoothing or SmoothingConfig()).delta
    J = train_counts.n_choices
    n_dest = train_counts.n_x * train_counts.n_partitions
    ns = train_counts.n_state
    nsc = train_counts.n_state_choice
    no = train_counts.n_origin_choice
    nt = train_counts.n_transition

    dc = 0.0
    for (x, p, j), n in val_counts.n_state_choice.items():
        dc += n * _log_ratio(nsc.get((x, p, j), 0) + delta, ns.get((x, p), 0) + delta * J)
        if dc == -math.inf:
            break

    weight = lambda_rel * lambda_adj_val
    tr = 0.0
    if weight > 0:
        for key, n in val_counts.n_transition.items():
            xo, po, j, xd, pd = key
            g_num = nt.get(key, 0) + delta
            g_den = no.get((xo, po, j), 0) + delta * n_dest
            state = ns.get((xd, pd), 0) + delta * J
            if g_num <= 0.0 or state <= 0.0:
                tr = -math.inf
                break
            tr += n * (math.log(g_num / g_den) - math.log(state))

    return (dc + weight * tr) / (1.0 + lambda_rel)
