"""Nested fixed-point maximum likelihood on the discretized state space.

States are pairs (x, pi) flattened as ``s = (x - x_min) * k + pi``. The
inner loop solves

    V(s) = log sum_j exp( u(s, j) + beta * sum_s' G[j, s, s'] V(s') )

and the outer loop maximizes the decision log-likelihood over the utility
parameters, with the transition law ``G`` fixed at its frequency estimate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_panel, check_probability_rows
from .panel import CountTables, Panel, count_tables
from .tree import Discretization

__all__ = [
    "EstimationError",
    "StateSpace",
    "TransitionTable",
    "ValueFunction",
    "UtilityModel",
    "LinearReplacementUtility",
    "NonparametricUtility",
    "ThetaEstimate",
    "estimate_transition",
    "value_iteration",
    "choice_values",
    "choice_probabilities",
    "log_likelihood",
    "estimate_theta",
    "NFXPEstimator",
]

logger = logging.getLogger(__name__)


class EstimationError(RuntimeError):
    """Outer optimization failed to converge; ``best`` holds the best point found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class StateSpace:
    n_x: int
    n_partitions: int
    x_min: int = 0

    @property
    def n_states(self) -> int:
        return self.n_x * self.n_partitions

    @property
    def x_max(self) -> int:
        return self.x_min + self.n_x - 1

    def index(self, x, pi):
        return (np.asarray(x) - self.x_min) * self.n_partitions + np.asarray(pi)

    @property
    def x_values(self) -> np.ndarray:
        return np.repeat(np.arange(self.x_min, self.x_min + self.n_x), self.n_partitions)

    @property
    def partitions(self) -> np.ndarray:
        return np.tile(np.arange(self.n_partitions), self.n_x)


@dataclass(frozen=True)
class TransitionTable:
    """Row-stochastic transition matrices, one per choice.

    matrix : ndarray, shape (n_choices, n_states, n_states)
        ``matrix[j, s, s2]`` is the probability of moving to ``s2`` from ``s``
        under choice ``j``.
    observed : bool ndarray, shape (n_choices, n_states)
        Origins whose row is a frequency estimate.
    imputed : tuple of (x, pi, j)
        Origins whose row was filled by the mileage rule.
    """

    matrix: np.ndarray
    space: StateSpace
    observed: np.ndarray | None = None
    imputed: tuple = ()

    def __post_init__(self):
        m = check_probability_rows(self.matrix)
        if m.ndim != 3 or m.shape[1:] != (self.space.n_states,) * 2:
            raise ValueError(
                f"transition matrix must have shape (J, {self.space.n_states}, {self.space.n_states})"
            )
        obs = self.observed
        if obs is None:
            obs = np.ones(m.shape[:2], dtype=bool)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "observed", np.asarray(obs, dtype=bool))

    @property
    def n_choices(self) -> int:
        return self.matrix.shape[0]

    def prob(self, x_to, pi_to, x_from, pi_from, j) -> float:
        sp = self.space
        return float(self.matrix[j, sp.index(x_from, pi_from), sp.index(x_to, pi_to)])

    def as_dict(self) -> dict:
        """Observed rows only, keyed like :class:`CountTables` transitions."""
        sp = self.space
        xs, ps = sp.x_values, sp.partitions
        out = {}
        for j, s in zip(*np.nonzero(self.observed)):
            for s2 in np.flatnonzero(self.matrix[j, s]):
                out[int(xs[s]), int(ps[s]), int(j), int(xs[s2]), int(ps[s2])] = float(self.matrix[j, s, s2])
        return out


def _fill_row(pool, x, x_min, x_max, k, shift):
    row = np.zeros((x_max - x_min + 1) * k)
    for (a, pi2), c in pool.items():
        x2 = min(max(x + a, x_min), x_max) if shift else a
        row[(x2 - x_min) * k + pi2] += c
    return row / row.sum()


def estimate_transition(counts: CountTables, shift_choices=(0,)) -> TransitionTable:
    """Frequency estimate N(x', pi', j -> x, pi) / N(x', pi', j).

    Origins never seen in the data get a row built from the same choice in the
    same partition at other mileages: for choices in ``shift_choices`` the
    observed mileage increments are reapplied (clamped to the x range), for
    the other choices the observed destinations are reused as they are. If a
    partition never makes that choice, all partitions are pooled; failing
    that the state is made absorbing. Every filled origin is listed in
    ``imputed``.
    """
    sp = StateSpace(counts.n_x, counts.n_partitions, counts.x_min)
    J, S, k = counts.n_choices, sp.n_states, sp.n_partitions
    G = np.zeros((J, S, S))
    shift_pool: dict = {}
    reset_pool: dict = {}
    for (xo, po, j, xd, pd), n in counts.n_transition.items():
        G[j, sp.index(xo, po), sp.index(xd, pd)] += n
        for pool, key in ((shift_pool, (xd - xo, pd)), (reset_pool, (xd, pd))):
            for scope in ((j, po), (j, None)):
                d = pool.setdefault(scope, {})
                d[key] = d.get(key, 0) + n
    tot = G.sum(axis=2)
    observed = tot > 0
    G[observed] /= tot[observed][:, None]

    imputed = []
    for j in range(J):
        shift = j in shift_choices
        pool = shift_pool if shift else reset_pool
        for s in np.flatnonzero(~observed[j]):
            x, pi = sp.x_min + s // k, s % k
            src = pool.get((j, pi)) or pool.get((j, None))
            if src:
                G[j, s] = _fill_row(src, x, sp.x_min, sp.x_max, k, shift)
            else:
                G[j, s, s] = 1.0
            imputed.append((int(x), int(pi), int(j)))
    return TransitionTable(G, sp, observed, tuple(imputed))


# -- inner loop -----------------------------------------------------------


@dataclass(frozen=True)
class ValueFunction:
    """Converged integrated value function over the flattened states."""

    values: np.ndarray
    beta: float
    space: StateSpace | None = None
    n_iter: int = 0
    residual: float = 0.0

    def table(self) -> np.ndarray:
        """Values reshaped to (n_x, n_partitions)."""
        if self.space is None:
            raise ValueError("no state space attached")
        return self.values.reshape(self.space.n_x, self.space.n_partitions)


def _as_matrix(g_hat) -> np.ndarray:
    return g_hat.matrix if isinstance(g_hat, TransitionTable) else np.asarray(g_hat, dtype=np.float64)


def choice_values(V, utility, g_hat) -> np.ndarray:
    """Choice-specific values v(s, j) = u(s, j) + beta * E[V(s') | s, j], shape (S, J)."""
    G = _as_matrix(g_hat)
    vals = V.values if isinstance(V, ValueFunction) else np.asarray(V)
    beta = V.beta if isinstance(V, ValueFunction) else 0.0
    u = np.asarray(utility, dtype=np.float64)
    if beta == 0.0:
        return u.copy()
    return u + beta * np.einsum("jst,t->sj", G, vals)


def _bellman(V, u, G, beta):
    v = u + beta * np.einsum("jst,t->sj", G, V)
    return logsumexp(v, axis=1), v


def value_iteration(utility, g_hat, beta: float, tolerance: float = 1e-10, *,
                    max_iter: int = 100_000, method: str = "contraction", v0=None,
                    space: StateSpace | None = None) -> ValueFunction:
    """Fixed point of the logit Bellman operator.

    Parameters
    ----------
    utility : ndarray, shape (S, J)
        Flow utilities.
    g_hat : TransitionTable or ndarray, shape (J, S, S)
    beta : float in [0, 1)
    tolerance : float
        Successive approximation stops once the sup-norm change falls below
        ``tolerance * (1 - beta) / beta``, which bounds the distance to the
        fixed point by ``tolerance``.
    method : {"contraction", "newton"}
        ``"newton"`` runs a few contraction steps and then Newton-Kantorovich
        steps, which converge quadratically; used inside the estimator.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    if method not in ("contraction", "newton"):
        raise ValueError(f"unknown method {method!r}")
    if isinstance(g_hat, TransitionTable):
        space = space or g_hat.space
        G = g_hat.matrix
    else:
        G = check_probability_rows(g_hat)
    u = np.asarray(utility, dtype=np.float64)
    if u.ndim != 2 or G.shape != (u.shape[1], u.shape[0], u.shape[0]):
        raise ValueError(f"utility shape {u.shape} does not match transition shape {G.shape}")
    if np.any(np.abs(G.sum(axis=2) - 1.0) > 1e-9):
        raise ValueError("every transition row must sum to 1")

    if beta == 0.0:
        return ValueFunction(logsumexp(u, axis=1), 0.0, space, 1, 0.0)

    V = np.zeros(u.shape[0]) if v0 is None else np.array(v0, dtype=np.float64)
    stop = tolerance * (1.0 - beta) / beta
    it = 0
    change = math.inf
    switch = 1e-3 if method == "newton" else -1.0
    while it < max_iter:
        TV, _ = _bellman(V, u, G, beta)
        change = float(np.max(np.abs(TV - V)))
        V = TV
        it += 1
        if change < stop or change < switch:
            break
    if method == "newton" and change >= stop:
        eye = np.eye(u.shape[0])
        for _ in range(50):
            TV, v = _bellman(V, u, G, beta)
            P = np.exp(v - TV[:, None])
            M = np.einsum("sj,jst->st", P, G)
            V = V + linalg.solve(eye - beta * M, TV - V)
            it += 1
            change = float(np.max(np.abs(_bellman(V, u, G, beta)[0] - V)))
            if change < max(stop, 64 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(V))))):
                break
    # below this the change is rounding noise in the Bellman update itself
    floor = 64 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(V))))
    if change >= max(stop, floor):
        raise RuntimeError(f"value iteration did not converge in {it} iterations (change {change:.3g})")
    residual = float(np.max(np.abs(_bellman(V, u, G, beta)[0] - V)))
    return ValueFunction(V, float(beta), space, it, residual)


def choice_probabilities(V, utility, g_hat) -> np.ndarray:
    """Logit probabilities p(j | s), shape (S, J); rows sum to 1."""
    v = choice_values(V, utility, g_hat)
    v -= v.max(axis=1, keepdims=True)
    e = np.exp(v)
    return e / e.sum(axis=1, keepdims=True)


# -- utility models -------------------------------------------------------


class UtilityModel:
    """Flow utilities linear in the parameters: u(s, j) = design[j, s] @ theta."""

    name = "base"

    def __init__(self, space: StateSpace, n_choices: int):
        self.space = space
        self.n_choices = n_choices
        self.design = self._design()

    def _design(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def names(self) -> list[str]:
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return self.design.shape[2]

    def utility(self, theta) -> np.ndarray:
        return np.einsum("jsp,p->sj", self.design, np.asarray(theta, dtype=np.float64))


class LinearReplacementUtility(UtilityModel):
    """Keep (j=0) pays ``c_m * x``; replace (j=1) pays a per-partition cost.

    Parameters are ``[c_m, rc_0, ..., rc_{k-1}]``.
    """

    name = "linear"

    def _design(self):
        if self.n_choices != 2:
            raise ValueError("the linear replacement model needs exactly two choices")
        sp = self.space
        S, k = sp.n_states, sp.n_partitions
        Z = np.zeros((2, S, 1 + k))
        Z[0, :, 0] = sp.x_values
        Z[1, np.arange(S), 1 + sp.partitions] = 1.0
        return Z

    @property
    def names(self):
        return ["c_m"] + [f"rc_{p}" for p in range(self.space.n_partitions)]


class NonparametricUtility(UtilityModel):
    """One free utility per observed (state, choice j >= 1); choice 0 is normalized to 0."""

    name = "nonparametric"

    def __init__(self, space, n_choices, observed_states):
        self._obs = np.flatnonzero(np.asarray(observed_states, dtype=bool))
        super().__init__(space, n_choices)

    def _design(self):
        S = self.space.n_states
        J = self.n_choices
        Z = np.zeros((J, S, len(self._obs) * (J - 1)))
        p = 0
        for j in range(1, J):
            for s in self._obs:
                Z[j, s, p] = 1.0
                p += 1
        return Z

    @property
    def names(self):
        xs, ps = self.space.x_values, self.space.partitions
        return [f"u[x={xs[s]},pi={ps[s]},j={j}]" for j in range(1, self.n_choices) for s in self._obs]


# -- outer loop -----------------------------------------------------------


@dataclass
class ThetaEstimate:
    """Estimated utility parameters, the plugged-in transitions and diagnostics."""

    theta: np.ndarray
    names: list
    log_likelihood: float
    n_obs: int
    beta: float
    model: str
    transition: TransitionTable
    value: ValueFunction
    std_errors: np.ndarray | None = None
    converged: bool = True
    n_iter: int = 0
    n_evaluations: int = 0
    gradient_norm: float = 0.0
    restarts: list = field(default_factory=list)

    def __getitem__(self, name):
        return float(self.theta[self.names.index(name)])

    @property
    def c_m(self) -> float:
        return self["c_m"]

    @property
    def replacement_costs(self) -> np.ndarray:
        return np.array([self.theta[i] for i, n in enumerate(self.names) if n.startswith("rc_")])

    @property
    def imputed_origins(self) -> tuple:
        return self.transition.imputed

    def summary_rows(self) -> list[dict]:
        se = self.std_errors if self.std_errors is not None else np.full(len(self.theta), np.nan)
        return [{"parameter": n, "estimate": float(t), "std_error": float(e)}
                for n, t, e in zip(self.names, self.theta, se)]


def _cell_counts(panel: Panel, labels, space: StateSpace) -> np.ndarray:
    s = space.index(panel.x, labels)
    n = np.zeros((space.n_states, panel.n_choices))
    np.add.at(n, (s, panel.d), 1.0)
    return n


class _Likelihood:
    """Mean negative log-likelihood and its analytic gradient, with V warm starts."""

    def __init__(self, model: UtilityModel, G, counts, beta, tol):
        self.model, self.G, self.counts, self.beta, self.tol = model, G, counts, beta, tol
        self.n = counts.sum()
        self.V = None
        self.n_eval = 0

    def solve(self, theta):
        u = self.model.utility(theta)
        vf = value_iteration(u, self.G, self.beta, self.tol, method="newton", v0=self.V)
        self.V = vf.values
        return u, vf

    def scores(self, theta):
        """Per-cell score d log p(j|s) / d theta, shape (S, J, P), log p and p."""
        u, vf = self.solve(theta)
        v = choice_values(vf, u, self.G)
        logP = v - logsumexp(v, axis=1, keepdims=True)
        P = np.exp(logP)
        Z = self.model.design
        rhs = np.einsum("sj,jsp->sp", P, Z)
        if self.beta > 0:
            M = np.einsum("sj,jst->st", P, self.G)
            dV = linalg.solve(np.eye(M.shape[0]) - self.beta * M, rhs)
            dv = Z + self.beta * np.einsum("jst,tp->jsp", self.G, dV)
        else:
            dv = Z
        dv = dv.transpose(1, 0, 2)
        mean = np.einsum("sj,sjp->sp", P, dv)
        return dv - mean[:, None, :], logP, vf

    def __call__(self, theta):
        self.n_eval += 1
        sc, logP, _ = self.scores(theta)
        mask = self.counts > 0
        ll = float(np.sum(self.counts[mask] * logP[mask]))
        grad = np.einsum("sj,sjp->p", self.counts, sc)
        return -ll / self.n, -grad / self.n


def log_likelihood(panel: Panel, disc, theta, model: UtilityModel, g_hat, beta, tol=1e-10) -> float:
    """Decision log-likelihood sum_i,t log p(d_it | x_it, pi_it) at ``theta``."""
    labels = disc.apply(panel.q) if hasattr(disc, "apply") else np.asarray(disc)
    counts = _cell_counts(panel, labels, model.space)
    nll, _ = _Likelihood(model, _as_matrix(g_hat), counts, beta, tol)(theta)
    return -nll * counts.sum()


def make_model(name: str, space: StateSpace, n_choices: int, cell_counts=None) -> UtilityModel:
    if name == "linear":
        return LinearReplacementUtility(space, n_choices)
    if name == "nonparametric":
        observed = np.ones(space.n_states, bool) if cell_counts is None else cell_counts.sum(axis=1) > 0
        return NonparametricUtility(space, n_choices, observed)
    raise ValueError(f"unknown utility model {name!r}; expected 'linear' or 'nonparametric'")


def estimate_theta(panel: Panel, disc: Discretization | None = None, beta: float = 0.95,
                   model: str = "linear", *, tol: float = 1e-10, gtol: float = 1e-6,
                   max_iter: int = 1000, n_restarts: int = 3, seed: int = 0,
                   theta0=None, transition: TransitionTable | None = None) -> ThetaEstimate:
    """Maximize the decision log-likelihood over the utility parameters.

    The transition law is the frequency estimate on the same discretization
    (it is separable from the utility parameters). The optimizer is BFGS on the
    per-observation mean negative log-likelihood with an analytic gradient,
    started from ``theta0`` (zeros by default) and ``n_restarts - 1``
    jittered copies; the best end point is kept.

    Raises
    ------
    EstimationError
        If no start reaches a gradient sup-norm below ``gtol``.
    """
    panel = check_panel(panel)
    if panel.n_obs == 0:
        raise ValueError("cannot estimate on an empty panel")
    disc = disc if disc is not None else Discretization.root(panel.n_dims)
    counts = count_tables(panel, disc)
    g_hat = transition if transition is not None else estimate_transition(counts)
    space = g_hat.space
    labels = disc.apply(panel.q)
    cells = _cell_counts(panel, labels, space)
    um = make_model(model, space, panel.n_choices, cells)
    lik = _Likelihood(um, g_hat.matrix, cells, beta, tol)

    start = np.zeros(um.n_params) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    starts = [start] + [start + rng.normal(0.0, 1.0, um.n_params) for _ in range(max(n_restarts, 1) - 1)]
    results = []
    for x0 in starts:
        lik.V = None
        res = optimize.minimize(lik, x0, jac=True, method="BFGS",
                                options={"gtol": gtol, "maxiter": max_iter})
        gnorm = float(np.max(np.abs(res.jac))) if res.jac.size else 0.0
        results.append((float(res.fun), res, gnorm))
        logger.debug("restart: nll %.10g, |grad| %.3g, %s", res.fun, gnorm, res.message)
    ok = [r for r in results if r[2] <= gtol or r[1].success]
    pool = ok or results
    fun, res, gnorm = min(pool, key=lambda r: r[0])

    theta = res.x
    lik.V = None
    sc, _, vf = lik.scores(theta)
    opg = np.einsum("sj,sjp,sjq->pq", cells, sc, sc)
    with np.errstate(invalid="ignore"):
        se = np.sqrt(np.diag(linalg.pinvh(opg)))
    est = ThetaEstimate(
        theta=theta, names=um.names, log_likelihood=-fun * cells.sum(), n_obs=panel.n_obs,
        beta=float(beta), model=um.name, transition=g_hat, value=vf, std_errors=se,
        converged=bool(ok), n_iter=int(res.nit), n_evaluations=lik.n_eval, gradient_norm=gnorm,
        restarts=[{"nll": r[0], "gradient_norm": r[2], "message": str(r[1].message)} for r in results],
    )
    if not ok:
        raise EstimationError(
            f"no start converged (best gradient sup-norm {gnorm:.3g} > {gtol})", best=est
        )
    return est


class NFXPEstimator(BaseEstimator):
    """Scikit-learn style front end to :func:`estimate_theta`.

    Parameters
    ----------
    beta : float, default=0.95
        Discount factor.
    model : {"linear", "nonparametric"}, default="linear"
    tol, gtol : float
        Inner value-function and outer gradient tolerances.
    n_restarts : int, default=3
    random_state : int, default=0
        Seed for the jittered restarts.
    """

    def __init__(self, beta=0.95, model="linear", tol=1e-10, gtol=1e-6, max_iter=1000,
                 n_restarts=3, random_state=0):
        self.beta = beta
        self.model = model
        self.tol = tol
        self.gtol = gtol
        self.max_iter = max_iter
        self.n_restarts = n_restarts
        self.random_state = random_state

    def fit(self, panel, discretization=None):
        panel = check_panel(panel)
        disc = discretization if discretization is not None else Discretization.root(panel.n_dims)
        self.estimate_ = estimate_theta(
            panel, disc, self.beta, self.model, tol=self.tol, gtol=self.gtol,
            max_iter=self.max_iter, n_restarts=self.n_restarts, seed=self.random_state,
        )
        self.discretization_ = disc
        self.coef_ = self.estimate_.theta
        self.space_ = self.estimate_.transition.space
        um = make_model(self.model, self.space_, panel.n_choices,
                        _cell_counts(panel, disc.apply(panel.q), self.space_))
        self.utility_ = um.utility(self.coef_)
        self.ccp_ = choice_probabilities(self.estimate_.value, self.utility_, self.estimate_.transition)
        return self

    def predict_proba(self, panel) -> np.ndarray:
        """Fitted choice probabilities for every row of ``panel``, shape (n_obs, J)."""
        check_is_fitted(self, "estimate_")
        panel = check_panel(panel)
        s = self.space_.index(panel.x, self.discretization_.apply(panel.q))
        return self.ccp_[s]

    def predict(self, panel) -> np.ndarray:
        return self.predict_proba(panel).argmax(axis=1)

    def score(self, panel, y=None) -> float:
        """Mean log-likelihood per observation."""
        panel = check_panel(panel)
        p = self.predict_proba(panel)[np.arange(panel.n_obs), panel.d]
        return float(np.mean(np.log(p)))
