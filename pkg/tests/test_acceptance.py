"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together in the
terminal summary. Monte Carlo checks run the same code path as
``ddctree experiment`` on one core, about ten minutes in total.
"""

import math

import numpy as np
import pytest
from scipy.special import logsumexp

from ddctree.config import parse_config
from ddctree.experiment import round_seed, run_experiment
from ddctree.nfxp import choice_probabilities, value_iteration
from ddctree.objective import SmoothingConfig, score
from ddctree.panel import Panel, count_tables
from ddctree.partitioner import (
    Hyperparameters,
    _context,
    _leaf_orders,
    _root_lambda_adj,
    _thresholds,
    evaluate_split,
    enumerate_candidates,
    grow,
    objective_parts,
    validation_score,
)
from ddctree.simulator import DgpConfig, match_partitions, sim1_truth, simulate
from ddctree.tree import Discretization

from conftest import ACCEPTANCE_LINES, random_panel

BASE_SEED = 2024


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


def study1_config(cost, mileage, q, budgets, rounds=20):
    return parse_config(f"""
dgp:
  study: 1
  q_transition: {q}
  n_buses: 400
  n_periods: 100
  c_m: -0.2
  beta: 0.95
  dissimilar_costs: {str(cost).lower()}
  dissimilar_transitions: {str(mileage).lower()}
partitioner:
  max_partitions: {list(budgets)}
  lambda_rel: [1.0]
  delta: 1.0e-5
estimator:
  beta: 0.95
  tolerance: 1.0e-10
  gtol: 1.0e-6
  n_restarts: 3
replication:
  n_rounds: {rounds}
  base_seed: {BASE_SEED}
""", "acceptance.yaml")


def study2_config(mileage, q, lambdas, rounds=20):
    return parse_config(f"""
dgp:
  study: 2
  q_transition: {q}
  n_buses: 100
  n_periods: 100
  c_m: -0.2
  beta: 0.95
  dissimilar_transitions: {str(mileage).lower()}
  validation: separate
partitioner:
  max_partitions: [15]
  min_observations: [1]
  min_lift: [1.0e-10]
  lambda_rel: {list(lambdas)}
replication:
  n_rounds: {rounds}
  base_seed: {BASE_SEED}
""", "acceptance.yaml")


def mean_of(table, setting, metric):
    vals = table.values(setting, metric)
    return float(np.mean(vals)) if vals else math.nan


@pytest.mark.slow
def test_01_bias_with_dissimilar_partitions():
    t = run_experiment(study1_config(True, True, "none", (1, 4)), jobs=1)
    assert not t.failures
    c1, c4 = mean_of(t, "k=1", "c_m"), mean_of(t, "k=4", "c_m")
    ok1, ok4 = -0.16 <= c1 <= -0.11, -0.21 <= c4 <= -0.185
    record(1, ok1 and ok4,
           f"mean c_m: 1 partition {c1:.4f} (need [-0.16, -0.11]: {'ok' if ok1 else 'miss'}), "
           f"4 partitions {c4:.4f} (need [-0.21, -0.185]: {'ok' if ok4 else 'miss'})")


@pytest.mark.slow
def test_02_unbiased_with_similar_partitions():
    t = run_experiment(study1_config(False, False, "none", (1, 2, 4, 6)), jobs=1)
    assert not t.failures
    means = {k: mean_of(t, f"k={k}", "c_m") for k in (1, 2, 4, 6)}
    ok = all(-0.21 <= m <= -0.19 for m in means.values())
    record(2, ok, "mean c_m by budget " + ", ".join(f"{k}: {m:.4f}" for k, m in means.items())
           + " (need [-0.21, -0.19])")


@pytest.mark.slow
def test_03_replacement_cost_recovery():
    t = run_experiment(study1_config(True, True, "random", (1, 4)), jobs=1)
    assert not t.failures
    est = np.array([mean_of(t, "k=4", f"rc_true_{p}") for p in range(4)])
    n_matched = [len(t.values("k=4", f"rc_true_{p}")) for p in range(4)]
    base = mean_of(t, "k=1", "rc_0")
    ok_parts = bool(np.all(np.abs(est - np.array([-7, -6, -5, -4])) <= 0.3)) and min(n_matched) == 20
    ok_base = abs(base - (-4.96)) <= 0.2
    record(3, ok_parts and ok_base,
           f"4-partition costs {np.round(est, 3).tolist()} over {min(n_matched)}/20 matched rounds "
           f"(need +-0.3 of [-7,-6,-5,-4]: {'ok' if ok_parts else 'miss'}); "
           f"1-partition cost {base:.3f} (need -4.96 +- 0.2: {'ok' if ok_base else 'miss'})")


@pytest.fixture(scope="module")
def sparse_dissimilar():
    t = run_experiment(study2_config(True, "sparse", (0, 2, 100)), jobs=1)
    assert not t.failures
    return t


@pytest.mark.slow
def test_04_lambda_ordering(sparse_dissimilar):
    t2 = run_experiment(study2_config(False, "random", (0, 100)), jobs=1)
    assert not t2.failures
    s0, s100 = mean_of(sparse_dissimilar, "lambda=0", "score"), mean_of(sparse_dissimilar, "lambda=100", "score")
    r0, r100 = mean_of(t2, "lambda=0", "score"), mean_of(t2, "lambda=100", "score")
    record(4, s100 > s0 and r0 > r100,
           f"sparse+dissimilar score lambda=100 {s100:.1f} > lambda=0 {s0:.1f}; "
           f"random+similar score lambda=0 {r0:.1f} > lambda=100 {r100:.1f}")


@pytest.mark.slow
def test_05_partition_matches(sparse_dissimilar):
    m0 = mean_of(sparse_dissimilar, "lambda=0", "matched")
    m2 = mean_of(sparse_dissimilar, "lambda=2", "matched")
    record(5, m2 - m0 >= 4, f"mean matches lambda=2 {m2:.2f} vs lambda=0 {m0:.2f} (gap {m2 - m0:.2f}, need >= 4)")


def test_06_monotonicity_and_incremental_deltas():
    rng = np.random.default_rng(6)
    worst_drop, worst_gap, n_splits, n_cands = 0.0, 0.0, 0, 0
    for _ in range(100):
        p = random_panel(rng, max_obs=200)
        assert p.n_obs <= 200 and p.n_dims <= 4
        lam_rel = float(rng.choice([0.0, 0.5, 1.0, 5.0]))
        disc, trace, lam_adj = grow(p, Hyperparameters(max_partitions=8, lambda_rel=lam_rel))
        lam = lam_rel * lam_adj
        for r in trace:
            worst_drop = min(worst_drop, r.delta_f_dc, r.delta_f_tr)
            worst_gap = max(worst_gap, abs(r.gain - (r.delta_f_dc + lam * r.delta_f_tr)))
            n_splits += 1
        # every candidate on the final tree: incremental gain against full recomputation
        before = objective_parts(p, disc.apply(p.q))
        for c in enumerate_candidates(disc, p, Hyperparameters()):
            after = objective_parts(p, disc.split(c.leaf, c.dim, c.threshold).apply(p.q))
            full = (after[0] - before[0]) + lam * (after[1] - before[1])
            worst_gap = max(worst_gap, abs(evaluate_split(p, disc, c, 1.0, lam) - full))
            n_cands += 1
    record(6, worst_drop >= -1e-9 and worst_gap <= 1e-9,
           f"{n_splits} accepted splits, min delta {worst_drop:.2e} (need >= -1e-9); "
           f"{n_cands} candidates, max |incremental - full| {worst_gap:.2e} (need <= 1e-9)")


@pytest.mark.slow
def test_07_perfect_discretization_recovery():
    hp = Hyperparameters(max_partitions=4, lambda_rel=1.0)
    parts, ok_all = [], True
    for q in ("none", "random", "sparse"):
        good_splits = matched4 = 0
        for r in range(40):
            cfg = DgpConfig(sim1_truth(True, True), q, n_buses=400, n_periods=100, seed=round_seed(BASE_SEED, r))
            p = simulate(cfg)
            disc = grow(p, hp)[0]
            th = disc.thresholds()
            good_splits += all(d in (0, 1) and 4 < t < 6 for d, t in th)
            matched4 += match_partitions(cfg.truth, disc, p) == 4
        ok = good_splits >= 36 and matched4 >= 34
        ok_all &= ok
        parts.append(f"{q}: splits ok {good_splits}/40, 4 matched {matched4}/40")
    record(7, ok_all, "; ".join(parts) + " (need >= 36/40 and >= 34/40)")


def _unique_path(p, hp):
    """True if no step of the greedy loop has two candidates within the tie tolerance."""
    disc = Discretization.root(p.n_dims)
    labels = np.zeros(p.n_obs, dtype=np.int64)
    f_dc, f_tr = objective_parts(p, labels)
    lam = _root_lambda_adj(f_dc, f_tr, hp.lambda_rel) * hp.lambda_rel
    while disc.n_leaves < hp.max_partitions:
        ctx = _context(p, labels, disc.n_leaves)
        gains = []
        for (leaf, j), order in _leaf_orders(p, labels, disc.n_leaves).items():
            pos, thr = _thresholds(p.q[order, j], hp.min_observations)
            if pos.size:
                dc, tr = ctx.scan(order)
                g = dc[pos - 1] + lam * tr[pos - 1]
                gains += [(float(x), leaf, j, float(t)) for x, t in zip(g, thr)]
        if not gains:
            return True
        gains.sort(reverse=True)
        top = gains[0][0]
        if top <= 1e-9 * max(1.0, abs(f_dc + lam * f_tr)):
            return True
        if len(gains) > 1 and gains[1][0] >= top - 1e-9 * max(1.0, abs(top)):
            return False
        _, leaf, j, t = gains[0]
        disc = disc.split(leaf, j, t)
        labels = disc.apply(p.q)
        f_dc, f_tr = objective_parts(p, labels)
    return True


def test_08_scale_and_irrelevant_variable_invariance():
    hp = Hyperparameters(max_partitions=4, lambda_rel=1.0)
    same = unique = 0
    for r in range(100):
        cfg = DgpConfig(sim1_truth(True, True, n_dims=4), "random", n_buses=60, n_periods=30, seed=r)
        p = simulate(cfg)
        if not _unique_path(p, hp):
            continue
        unique += 1
        base = grow(p, hp)[0].apply(p.q)
        noise = np.random.default_rng([r, 1]).random((p.n_obs, 8))
        q2 = np.column_stack([p.q ** 3, noise])
        other = grow(p.with_q(q2), hp)[0].apply(q2)
        pairs = set(zip(base.tolist(), other.tolist()))
        same += len(pairs) == len(set(base.tolist())) == len(set(other.tolist()))
    record(8, unique > 0 and same == unique,
           f"identical leaf membership in {same}/{unique} runs with a unique baseline tree (of 100)")


def test_09_solver_correctness():
    rng = np.random.default_rng(9)
    worst_res, worst_row = 0.0, 0.0
    for _ in range(20):
        S, J = 30, 3
        u = rng.normal(size=(S, J))
        G = rng.random((J, S, S))
        G /= G.sum(axis=2, keepdims=True)
        beta = float(rng.uniform(0.5, 0.99))
        V = value_iteration(u, G, beta, 1e-10)
        worst_res = max(worst_res, V.residual)
        P = choice_probabilities(V, u, G)
        worst_row = max(worst_row, float(np.max(np.abs(P.sum(axis=1) - 1.0))))
    V0 = value_iteration(u, G, 0.0)
    exact0 = bool(np.array_equal(V0.values, logsumexp(u, axis=1)))
    uu = np.array([[0.0, -1.0], [-0.5, 0.3]])
    GG = np.array([[[0.8, 0.2], [0.3, 0.7]], [[0.1, 0.9], [0.6, 0.4]]])
    oracle = np.zeros(2)
    for _ in range(500):
        oracle = logsumexp(uu + 0.9 * np.einsum("jst,t->sj", GG, oracle), axis=1)
    toy_err = float(np.max(np.abs(value_iteration(uu, GG, 0.9, 1e-12).values - oracle)))
    ok = worst_res < 1e-10 and worst_row <= 1e-12 and exact0 and toy_err < 1e-8
    record(9, ok, f"Bellman residual {worst_res:.1e}, row-sum error {worst_row:.1e}, "
                  f"beta=0 exact {exact0}, toy vs 500-period oracle {toy_err:.1e}")


def test_10_smoothing():
    train = Panel(agent=[0] * 4 + [1] * 4, period=[1, 2, 3, 4] * 2, x=[1, 2, 3, 1, 1, 2, 1, 2],
                  d=[0, 0, 1, 0, 0, 1, 0, 0], q=[[0.0]] * 4 + [[1.0]] * 4, n_choices=2, x_range=(1, 4))
    # every validation state and choice occurs in training, but the move
    # 1 -> 3 under keep (agent 9) does not; agent 10 mixes choices at x = 2 so
    # both parts of the validation root objective are nonzero
    val = Panel(agent=[9, 9, 9, 10, 10, 10], period=[1, 2, 3] * 2, x=[1, 3, 1, 2, 1, 2], d=[0, 1, 0, 1, 0, 0],
                q=[[0.0]] * 3 + [[1.0]] * 3, n_choices=2, x_range=(1, 4))
    disc = Discretization.root(1).split(0, 0, 0.5)
    smoothed = validation_score(train, val, disc, 1.0, 1e-5)
    raw = validation_score(train, val, disc, 1.0, 0.0)
    tr_c, va_c = count_tables(train, disc), count_tables(val, disc)
    assert set(va_c.n_state_choice) <= set(tr_c.n_state_choice)
    assert not set(va_c.n_transition) <= set(tr_c.n_transition)
    decisions_only = score(tr_c, va_c, 0.0, 0.0, SmoothingConfig(0.0))
    record(10, math.isfinite(smoothed) and raw == -math.inf and math.isfinite(decisions_only),
           f"score with delta=1e-5 {smoothed:.3f}; with delta=0 {raw}")
