"""Bus-engine replacement data with a covariate-dependent cost and mileage law.

A true discretization of the covariate space assigns every bus-period to a
partition ``pi``. Keeping the engine pays ``c_m * x``; replacing pays
``f_dc[pi]``. Mileage moves by ``f_tr[pi]`` under keep (capped at
``x_max``) and resets to ``max(f_tr[pi], replace_floor)`` under replace
(the floor defaults to 1). Between periods the partition moves according to
a Q-transition model and the covariates are redrawn uniformly inside the new
partition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .nfxp import StateSpace, choice_probabilities, value_iteration
from .panel import Panel
from .tree import Discretization

__all__ = [
    "QTransition",
    "TruePartitionSpec",
    "DgpConfig",
    "sim1_truth",
    "random_discretization",
    "true_transition",
    "true_ccp",
    "transition_q",
    "simulate",
    "simulate_train_validation",
    "match_partitions",
    "matched_leaves",
]


class QTransition(str, Enum):
    NONE = "none"
    RANDOM = "random"
    SPARSE = "sparse"


@dataclass(frozen=True)
class TruePartitionSpec:
    """True discretization with per-partition replacement cost and mileage step.

    ``order`` lists leaf ids along the cycle used by sparse transitions, and
    ``sparse_probs[i]`` is the probability of moving ``i`` steps along it.
    Covariates live in the box ``[lower, upper)``; with ``integer`` set they
    are integers in that box.
    """

    tree: Discretization
    f_dc: tuple
    f_tr: tuple
    order: tuple
    sparse_probs: tuple
    lower: tuple
    upper: tuple
    integer: bool = False

    def __post_init__(self):
        k = self.tree.n_leaves
        if not len(self.f_dc) == len(self.f_tr) == len(self.order) == k:
            raise ValueError(f"f_dc, f_tr and order must each have {k} entries")
        if sorted(self.order) != list(range(k)):
            raise ValueError("order must be a permutation of the leaf ids")
        if any(t not in (0, 1, 2, 3) for t in self.f_tr):
            raise ValueError("mileage steps must lie in {0, 1, 2, 3}")
        if not np.isclose(sum(self.sparse_probs), 1.0):
            raise ValueError("sparse_probs must sum to 1")
        if len(self.lower) != len(self.upper) or (
            self.tree.n_dims is not None and len(self.lower) != self.tree.n_dims
        ):
            raise ValueError("box bounds must have one entry per covariate")

    @property
    def n_partitions(self) -> int:
        return self.tree.n_leaves

    @property
    def n_dims(self) -> int:
        return len(self.lower)

    def boxes(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-leaf sampling boxes, shape (k, D) each; integer boxes are [lo, hi) on integers."""
        lo = np.empty((self.n_partitions, self.n_dims))
        hi = np.empty_like(lo)
        for p in range(self.n_partitions):
            lo[p], hi[p] = self.tree.leaf_bounds(p, self.lower, self.upper)
        if self.integer:
            lo, hi = np.ceil(lo), np.ceil(hi)
        return lo, hi

    def volumes(self) -> np.ndarray:
        """Share of the covariate box (or of its integer points) in each leaf."""
        lo, hi = self.boxes()
        v = np.prod(hi - lo, axis=1)
        return v / v.sum()

    def q_matrix(self, model) -> np.ndarray:
        """Partition-to-partition transition matrix, shape (k, k)."""
        model = QTransition(model)
        k = self.n_partitions
        if model is QTransition.NONE:
            return np.eye(k)
        if model is QTransition.RANDOM:
            return np.tile(self.volumes(), (k, 1))
        T = np.zeros((k, k))
        pos = {leaf: i for i, leaf in enumerate(self.order)}
        for leaf in range(k):
            for step, pr in enumerate(self.sparse_probs):
                T[leaf, self.order[(pos[leaf] + step) % k]] += pr
        return T

    def to_json(self) -> str:
        return json.dumps({
            "f_dc": list(self.f_dc), "f_tr": list(self.f_tr), "order": list(self.order),
            "sparse_probs": list(self.sparse_probs), "lower": list(self.lower),
            "upper": list(self.upper), "integer": self.integer, "tree": self.tree.dumps(),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> TruePartitionSpec:
        d = json.loads(text)
        return cls(Discretization.loads(d["tree"]), tuple(d["f_dc"]), tuple(d["f_tr"]),
                   tuple(d["order"]), tuple(d["sparse_probs"]), tuple(d["lower"]),
                   tuple(d["upper"]), bool(d["integer"]))


def sim1_truth(dissimilar_costs: bool, dissimilar_transitions: bool, n_dims: int = 10,
               mileage_steps=None) -> TruePartitionSpec:
    """Four quadrants on the first two covariates (cut at 5), integers 0..9.

    Leaf ids 0..3 are (low, low), (low, high), (high, low), (high, high).
    ``mileage_steps`` overrides the per-leaf steps of the dissimilar case.
    """
    if n_dims < 2:
        raise ValueError("need at least two covariates")
    tree = Discretization.root(n_dims).split(0, 0, 5.0).split(0, 1, 5.0).split(2, 1, 5.0)
    f_dc = (-7.0, -6.0, -5.0, -4.0) if dissimilar_costs else (-5.0,) * 4
    f_tr = (0, 1, 2, 3) if dissimilar_transitions else (1,) * 4
    if mileage_steps is not None:
        f_tr = tuple(int(v) for v in mileage_steps)
    return TruePartitionSpec(tree, f_dc, f_tr, (0, 1, 2, 3), (0.5, 0.5),
                             (0.0,) * n_dims, (10.0,) * n_dims, integer=True)


def random_discretization(seed, n_splits: int = 14, relevant_dims: int = 10, total_dims: int = 30,
                          dissimilar_transitions: bool = False, low: float = 0.0,
                          high: float = 10.0) -> TruePartitionSpec:
    """Random tree grown by weighted midpoint splits on the relevant covariates.

    Each round picks a leaf with probability proportional to
    ``(1 / splits above it) ** 2`` and a relevant covariate uniformly, and
    halves the leaf along it. The replacement cost of a leaf is
    ``5 - sum_i (lo_i + hi_i) / 10`` over the relevant covariates. Mileage
    steps are all 1, or uniform on {0, 1, 2, 3} when
    ``dissimilar_transitions``. The sparse-transition cycle is a random
    ordering of the leaves.
    """
    if not 1 <= relevant_dims <= total_dims:
        raise ValueError("need 1 <= relevant_dims <= total_dims")
    rng = np.random.default_rng(seed)
    lower, upper = (low,) * total_dims, (high,) * total_dims
    tree = Discretization.root(total_dims)
    failures = 0
    done = 0
    while done < n_splits:
        depth = tree.leaf_depths()
        w = 1.0 / np.maximum(depth, 1).astype(float) ** 2
        leaf = int(rng.choice(tree.n_leaves, p=w / w.sum()))
        dim = int(rng.integers(relevant_dims))
        lo, hi = tree.leaf_bounds(leaf, lower, upper)
        mid = lo[dim] + (hi[dim] - lo[dim]) / 2.0
        if not lo[dim] < mid < hi[dim]:
            failures += 1
            if failures >= 1000:
                raise RuntimeError("could not place a split after 1000 attempts")
            continue
        tree = tree.split(leaf, dim, mid)
        done += 1
    k = tree.n_leaves
    f_dc = []
    for p in range(k):
        lo, hi = tree.leaf_bounds(p, lower, upper)
        f_dc.append(5.0 - float(np.sum(lo[:relevant_dims] + hi[:relevant_dims])) / 10.0)
    f_tr = tuple(int(v) for v in rng.integers(0, 4, k)) if dissimilar_transitions else (1,) * k
    order = tuple(int(v) for v in rng.permutation(k))
    return TruePartitionSpec(tree, tuple(f_dc), f_tr, order, (1 / 3, 1 / 3, 1 / 3), lower, upper)


@dataclass(frozen=True)
class DgpConfig:
    truth: TruePartitionSpec
    q_transition: QTransition = QTransition.RANDOM
    n_buses: int = 400
    n_periods: int = 100
    c_m: float = -0.2
    beta: float = 0.95
    seed: int = 0
    x_min: int = 1
    x_max: int = 20
    x_init: int = 1
    replace_floor: int = 1
    tolerance: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "q_transition", QTransition(self.q_transition))
        if self.n_buses < 1 or self.n_periods < 1:
            raise ValueError("n_buses and n_periods must be positive")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if not self.x_min <= self.x_init <= self.x_max:
            raise ValueError("need x_min <= x_init <= x_max")
        if not self.x_min <= self.replace_floor <= self.x_max:
            raise ValueError("need x_min <= replace_floor <= x_max")

    @property
    def space(self) -> StateSpace:
        return StateSpace(self.x_max - self.x_min + 1, self.truth.n_partitions, self.x_min)


def _next_mileage(x, step, replace, x_min, x_max, floor):
    kept = np.where(x < x_max, np.minimum(x + step, x_max), x)
    reset = np.clip(np.maximum(step, floor), x_min, x_max)
    return np.where(replace, reset, kept)


def true_transition(config: DgpConfig) -> np.ndarray:
    """Exact (x, pi) transition law, shape (2, S, S)."""
    sp = config.space
    T = config.truth.q_matrix(config.q_transition)
    xs, ps = sp.x_values, sp.partitions
    step = np.asarray(config.truth.f_tr)[ps]
    k = sp.n_partitions
    G = np.zeros((2, sp.n_states, sp.n_states))
    for j in (0, 1):
        x2 = _next_mileage(xs, step, bool(j), config.x_min, config.x_max, config.replace_floor)
        base = (x2 - sp.x_min) * k
        for p2 in range(k):
            G[j, np.arange(sp.n_states), base + p2] += T[ps, p2]
    return G


def true_ccp(config: DgpConfig) -> np.ndarray:
    """True choice probabilities p(j | x, pi), shape (S, 2)."""
    sp = config.space
    u = np.column_stack([config.c_m * sp.x_values, np.asarray(config.truth.f_dc)[sp.partitions]])
    G = true_transition(config)
    V = value_iteration(u, G, config.beta, config.tolerance, method="newton", space=sp)
    return choice_probabilities(V, u, G)


def _draw_in_leaf(leaf, u, lo, hi, integer):
    a, b = lo[leaf], hi[leaf]
    q = a + u * (b - a)
    return np.floor(q) if integer else q


def transition_q(current_partition: int, model, spec: TruePartitionSpec, rng) -> np.ndarray:
    """Move to a new partition under ``model`` and draw covariates uniformly inside it."""
    row = spec.q_matrix(model)[int(current_partition)]
    nxt = int(rng.choice(spec.n_partitions, p=row))
    lo, hi = spec.boxes()
    return _draw_in_leaf(nxt, rng.random(spec.n_dims), lo, hi, spec.integer)


def _bus_draws(seed, bus_ids, n_periods, n_dims):
    """Per-bus uniforms, each bus from its own stream keyed by (seed, bus id)."""
    B = len(bus_ids)
    u_choice = np.empty((B, n_periods))
    u_move = np.empty((B, n_periods))
    u_q = np.empty((B, n_periods, n_dims))
    for i, b in enumerate(bus_ids):
        rng = np.random.default_rng([int(seed), int(b)])
        u_choice[i] = rng.random(n_periods)
        u_move[i] = rng.random(n_periods)
        u_q[i] = rng.random((n_periods, n_dims))
    return u_choice, u_move, u_q


def simulate(config: DgpConfig, bus_ids=None) -> Panel:
    """Forward-simulate the true model; deterministic given ``config.seed``.

    Every bus starts at ``x_init`` with covariates uniform on the whole box.
    ``bus_ids`` defaults to ``range(n_buses)``; any bus is reproduced exactly
    whatever other buses are simulated with it.
    """
    spec = config.truth
    sp = config.space
    bus_ids = np.arange(config.n_buses) if bus_ids is None else np.asarray(bus_ids, dtype=np.int64)
    B, T, D = len(bus_ids), config.n_periods, spec.n_dims
    P = true_ccp(config)
    Tq = config.truth.q_matrix(config.q_transition)
    cum = np.cumsum(Tq, axis=1)
    cum[:, -1] = 1.0
    lo, hi = spec.boxes()
    vol_cum = np.cumsum(spec.volumes())
    vol_cum[-1] = 1.0
    step_of = np.asarray(spec.f_tr, dtype=np.int64)
    u_choice, u_move, u_q = _bus_draws(config.seed, bus_ids, T, D)

    xs = np.empty((B, T), dtype=np.int64)
    ds = np.empty((B, T), dtype=np.int64)
    qs = np.empty((B, T, D))
    x = np.full(B, config.x_init, dtype=np.int64)
    # the first partition is drawn by volume, which is the same as q uniform on the box
    pi = np.minimum(np.searchsorted(vol_cum, u_move[:, 0], side="right"), sp.n_partitions - 1)
    for t in range(T):
        if t > 0:
            u = u_move[:, t][:, None]
            pi = np.minimum((u >= cum[pi]).sum(axis=1), sp.n_partitions - 1)
        qs[:, t] = _draw_in_leaf(pi, u_q[:, t], lo, hi, spec.integer)
        s = sp.index(x, pi)
        d = (u_choice[:, t] < P[s, 1]).astype(np.int64)
        xs[:, t], ds[:, t] = x, d
        x = _next_mileage(x, step_of[pi], d == 1, config.x_min, config.x_max, config.replace_floor)

    return Panel(
        np.repeat(bus_ids, T), np.tile(np.arange(1, T + 1), B), xs.ravel(), ds.ravel(),
        qs.reshape(B * T, D), n_choices=2, x_range=(config.x_min, config.x_max),
    )


def simulate_train_validation(config: DgpConfig) -> tuple[Panel, Panel]:
    """Training panel of ``n_buses`` buses and an independent validation panel of the same size."""
    train = simulate(config)
    val = simulate(config, np.arange(config.n_buses, 2 * config.n_buses))
    return train, val


def matched_leaves(truth, estimated: Discretization, panel: Panel) -> dict:
    """Map each exactly recovered true partition to the estimated leaf holding the same rows.

    True partitions holding no rows are never matched.
    """
    tree = truth.tree if isinstance(truth, TruePartitionSpec) else truth
    a = tree.apply(panel.q)
    b = estimated.apply(panel.q)
    ka, kb = int(a.max()) + 1, int(b.max()) + 1
    C = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(C, (a, b), 1)
    na, nb = C.sum(axis=1), C.sum(axis=0)
    hit = (C == na[:, None]) & (C == nb[None, :]) & (C > 0)
    return {int(p): int(np.flatnonzero(hit[p])[0]) for p in np.flatnonzero(hit.any(axis=1))}


def match_partitions(truth, estimated: Discretization, panel: Panel) -> int:
    """Number of true partitions whose set of panel rows equals some estimated leaf's."""
    return len(matched_leaves(truth, estimated, panel))
