"""Greedy recursive partitioning of the covariate space.

Splits are made on covariates only; the low-dimensional state ``x`` enters
through the count cells. At every round each (leaf, dimension, threshold)
candidate is scored by the gain in

    F = F_dc + lambda_adj * lambda_rel * F_tr

and the best one is applied, until a stopping rule fires.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import objective as obj
from ._scan import SplitContext, phi_table
from ._validation import check_covariates, check_panel
from .panel import Panel, count_tables
from .tree import Discretization

__all__ = [
    "Hyperparameters",
    "SplitCandidate",
    "SplitRecord",
    "TuningResult",
    "enumerate_candidates",
    "evaluate_split",
    "objective_parts",
    "discretize",
    "grow",
    "tune",
    "RecursivePartitioner",
]

logger = logging.getLogger(__name__)

# relative tolerance under which two gains count as tied, and a gain counts as zero
_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class Hyperparameters:
    min_observations: int = 1
    min_lift: float = 1e-10
    max_partitions: int = 10
    lambda_rel: float = 1.0
    delta: float = 1e-5

    def __post_init__(self):
        if int(self.min_observations) < 1:
            raise ValueError("min_observations must be >= 1")
        if int(self.max_partitions) < 1:
            raise ValueError("max_partitions must be >= 1")
        if not self.min_lift >= 0:
            raise ValueError("min_lift must be >= 0")
        if not self.lambda_rel >= 0:
            raise ValueError("lambda_rel must be >= 0")
        if not self.delta >= 0:
            raise ValueError("delta must be >= 0")


@dataclass(frozen=True, order=True)
class SplitCandidate:
    leaf: int
    dim: int
    threshold: float


@dataclass(frozen=True)
class SplitRecord:
    """One accepted split and the objective before/after it."""

    leaf: int
    dim: int
    threshold: float
    gain: float
    delta_f_dc: float
    delta_f_tr: float
    f_dc: float
    f_tr: float
    combined: float


def _labels(panel: Panel, disc: Discretization) -> np.ndarray:
    return disc.apply(panel.q) if disc.n_leaves > 1 else np.zeros(panel.n_obs, dtype=np.int64)


def objective_parts(panel: Panel, labels: np.ndarray) -> tuple[float, float]:
    """(F_dc, F_tr) from dense counts; same value as the dict-based functions."""
    if panel.n_obs == 0:
        return 0.0, 0.0
    k = int(labels.max()) + 1
    J = panel.n_choices
    n_states = panel.n_x * k
    state = panel.x_index * k + labels
    sc = state * J + panel.d
    src = np.flatnonzero(panel.successor >= 0)
    dst = panel.successor[src]
    n_state = np.bincount(state, minlength=n_states)
    n_in = np.bincount(state[dst], minlength=n_states)
    n_sc = np.bincount(sc, minlength=n_states * J)
    n_oc = np.bincount(sc[src], minlength=n_states * J)
    _, n_t = np.unique(state[dst] * (n_states * J) + sc[src], return_counts=True)
    phi, logc = phi_table(panel.n_obs)
    f_dc = phi[n_sc].sum() - phi[n_state].sum()
    f_tr = phi[n_t].sum() - (n_in * logc[n_state]).sum() - phi[n_oc].sum()
    return float(f_dc), float(f_tr)


def _root_lambda_adj(f_dc0: float, f_tr0: float, lambda_rel: float) -> float:
    if lambda_rel == 0 or f_tr0 == 0.0:
        # nothing to rescale: either the transition part is switched off or it
        # is identically zero and stays zero under every refinement
        return 0.0
    return abs(f_dc0 / f_tr0)


def _leaf_orders(panel: Panel, labels: np.ndarray, k: int):
    """For each leaf and dim, the leaf rows sorted by that covariate (stable)."""
    global_orders = [np.argsort(panel.q[:, j], kind="stable") for j in range(panel.n_dims)]
    out = {}
    for leaf in range(k):
        in_leaf = labels == leaf
        for j, go in enumerate(global_orders):
            out[leaf, j] = go[in_leaf[go]]
    return out


def _thresholds(values: np.ndarray, min_obs: int):
    """Valid cut positions ``i`` (first ``i`` sorted rows go left) and midpoints."""
    m = values.shape[0]
    i = np.arange(1, m)
    ok = values[:-1] < values[1:]
    ok &= (i >= min_obs) & (m - i >= min_obs)
    pos = i[ok]
    lo, hi = values[pos - 1], values[pos]
    thr = lo + (hi - lo) / 2.0
    bad = thr <= lo
    thr[bad] = hi[bad]
    return pos, thr


def enumerate_candidates(disc: Discretization, panel: Panel, hp: Hyperparameters) -> list[SplitCandidate]:
    """All admissible splits: midpoints between consecutive distinct values."""
    panel = check_panel(panel)
    labels = _labels(panel, disc)
    out = []
    for (leaf, j), order in sorted(_leaf_orders(panel, labels, disc.n_leaves).items()):
        _, thr = _thresholds(panel.q[order, j], hp.min_observations)
        out += [SplitCandidate(leaf, j, float(t)) for t in thr]
    return out


def _context(panel: Panel, labels: np.ndarray, k: int, phi=None, logc=None) -> SplitContext:
    return SplitContext(
        panel.x_index, panel.d, panel.successor, panel.predecessor, labels, k,
        panel.n_x, panel.n_choices, phi, logc,
    )


def evaluate_split(panel: Panel, disc: Discretization, candidate: SplitCandidate,
                   lambda_rel: float, lambda_adj: float) -> float:
    """Gain in the combined objective from applying ``candidate`` to ``disc``.

    Computed incrementally: only count cells touching the split leaf change.
    """
    panel = check_panel(panel)
    labels = _labels(panel, disc)
    rows = np.flatnonzero(labels == candidate.leaf)
    order = rows[np.argsort(panel.q[rows, candidate.dim], kind="stable")]
    n_left = int(np.count_nonzero(panel.q[order, candidate.dim] < candidate.threshold))
    if n_left == 0 or n_left == order.shape[0]:
        return 0.0
    ctx = _context(panel, labels, disc.n_leaves)
    dc, tr = ctx.scan(order)
    return float(dc[n_left - 1] + lambda_rel * lambda_adj * tr[n_left - 1])


def _best_candidate(panel, labels, k, hp, lam, phi, logc):
    ctx = _context(panel, labels, k, phi, logc)
    best = None  # (gain, dim, threshold, leaf, d_dc, d_tr)
    for (leaf, j), order in _leaf_orders(panel, labels, k).items():
        if order.shape[0] < 2 * hp.min_observations:
            continue
        pos, thr = _thresholds(panel.q[order, j], hp.min_observations)
        if pos.size == 0:
            continue
        dc, tr = ctx.scan(order)
        gains = dc[pos - 1] + lam * tr[pos - 1]
        top = gains.max()
        tol = _TIE_RTOL * max(1.0, abs(top))
        # lowest threshold among near-ties inside this (leaf, dim)
        i = int(np.flatnonzero(gains >= top - tol)[0])
        cand = (float(gains[i]), j, float(thr[i]), leaf, float(dc[pos[i] - 1]), float(tr[pos[i] - 1]))
        if best is None:
            best = cand
            continue
        tol = _TIE_RTOL * max(1.0, abs(best[0]), abs(cand[0]))
        if cand[0] > best[0] + tol:
            best = cand
        elif abs(cand[0] - best[0]) <= tol and cand[1:4] < best[1:4]:
            best = cand
    return best


def grow(train: Panel, hp: Hyperparameters) -> tuple[Discretization, list[SplitRecord], float]:
    """Run the greedy loop; returns the tree, the split trace and lambda_adj."""
    train = check_panel(train)
    disc = Discretization.root(train.n_dims)
    labels = np.zeros(train.n_obs, dtype=np.int64)
    if train.n_obs == 0:
        return disc, [], 0.0
    f_dc, f_tr = objective_parts(train, labels)
    lam_adj = _root_lambda_adj(f_dc, f_tr, hp.lambda_rel)
    lam = lam_adj * hp.lambda_rel
    F = f_dc + lam * f_tr
    phi, logc = phi_table(train.n_obs)
    trace: list[SplitRecord] = []
    while disc.n_leaves < hp.max_partitions:
        best = _best_candidate(train, labels, disc.n_leaves, hp, lam, phi, logc)
        if best is None:
            break
        gain, dim, thr, leaf = best[:4]
        if gain <= _TIE_RTOL * max(1.0, abs(F)):
            break
        if F == 0.0 or gain / abs(F) < hp.min_lift:
            break
        disc = disc.split(leaf, dim, thr)
        labels = disc.apply(train.q)
        new_dc, new_tr = objective_parts(train, labels)
        new_F = new_dc + lam * new_tr
        trace.append(SplitRecord(leaf, dim, thr, gain, new_dc - f_dc, new_tr - f_tr, new_dc, new_tr, new_F))
        logger.debug("split leaf %d on dim %d at %g: gain %.6g", leaf, dim, thr, gain)
        f_dc, f_tr, F = new_dc, new_tr, new_F
    return disc, trace, lam_adj


def discretize(train: Panel, hp: Hyperparameters) -> Discretization:
    """Greedy discretization of ``train``'s covariate space."""
    return grow(train, hp)[0]


def validation_score(train: Panel, validation: Panel, disc: Discretization,
                     lambda_rel: float, delta: float) -> float:
    """Smoothed out-of-sample objective of ``disc`` (train probabilities, validation weights)."""
    val_root = count_tables(validation, Discretization.root(validation.n_dims))
    f_dc0, f_tr0 = obj.f_dc(val_root), obj.f_tr(val_root)
    lam_adj_val = abs(f_dc0 / f_tr0) if f_tr0 != 0.0 else 0.0
    return obj.score(
        count_tables(train, disc),
        count_tables(validation, disc),
        lambda_rel,
        lam_adj_val,
        obj.SmoothingConfig(delta),
    )


@dataclass
class TuningResult:
    best: Hyperparameters
    discretization: Discretization
    score: float
    table: list[dict] = field(default_factory=list)

    def __iter__(self):
        # unpacks as (hyperparameters, discretization, report)
        return iter((self.best, self.discretization, self.table))


def tune(train: Panel, validation: Panel, grid) -> TuningResult:
    """Fit one tree per grid point on ``train`` and keep the best validation score.

    Ties go to the earliest grid entry.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("hyperparameter grid is empty")
    train = check_panel(train)
    validation = check_panel(validation)
    rows = []
    best = None
    for i, hp in enumerate(grid):
        disc = discretize(train, hp)
        s = validation_score(train, validation, disc, hp.lambda_rel, hp.delta)
        rows.append({"index": i, **asdict(hp), "n_leaves": disc.n_leaves, "score": s})
        if best is None or s > best[0]:
            best = (s, hp, disc)
    return TuningResult(best[1], best[2], best[0], rows)


class RecursivePartitioner(TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`grow`.

    ``fit`` takes a :class:`~ddctree.panel.Panel` or a path to a panel CSV;
    ``transform``/``apply`` map covariate rows to partition ids.

    Attributes
    ----------
    discretization_ : Discretization
    trace_ : list of SplitRecord
    lambda_adj_ : float
    n_partitions_ : int
    """

    def __init__(self, max_partitions=10, min_observations=1, min_lift=1e-10,
                 lambda_rel=1.0, delta=1e-5):
        self.max_partitions = max_partitions
        self.min_observations = min_observations
        self.min_lift = min_lift
        self.lambda_rel = lambda_rel
        self.delta = delta

    def _hyperparameters(self) -> Hyperparameters:
        return Hyperparameters(
            min_observations=int(self.min_observations),
            min_lift=float(self.min_lift),
            max_partitions=int(self.max_partitions),
            lambda_rel=float(self.lambda_rel),
            delta=float(self.delta),
        )

    def fit(self, panel, y=None):
        panel = check_panel(panel)
        disc, trace, lam_adj = grow(panel, self._hyperparameters())
        self.discretization_ = disc
        self.trace_ = trace
        self.lambda_adj_ = lam_adj
        self.n_partitions_ = disc.n_leaves
        self.n_features_in_ = panel.n_dims
        self.train_panel_ = panel
        return self

    def apply(self, Q) -> np.ndarray:
        check_is_fitted(self, "discretization_")
        if isinstance(Q, Panel):
            Q = Q.q
        Q = check_covariates(Q, self.n_features_in_)
        return self.discretization_.apply(Q)

    def transform(self, Q) -> np.ndarray:
        return self.apply(Q).reshape(-1, 1)

    def fit_transform(self, panel, y=None, **fit_params):
        return self.fit(panel).transform(check_panel(panel).q)

    def score(self, panel, y=None) -> float:
        """Smoothed validation score of the fitted tree on ``panel``."""
        check_is_fitted(self, "discretization_")
        return validation_score(
            self.train_panel_, check_panel(panel), self.discretization_,
            float(self.lambda_rel), float(self.delta),
        )

    def with_params(self, **kw) -> Hyperparameters:
        return replace(self._hyperparameters(), **kw)
