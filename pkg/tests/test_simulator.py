import numpy as np
import pytest
from scipy.stats import chi2_contingency

from ddctree.panel import write_panel
from ddctree.simulator import (
    DgpConfig,
    QTransition,
    TruePartitionSpec,
    _next_mileage,
    match_partitions,
    random_discretization,
    sim1_truth,
    simulate,
    transition_q,
    true_ccp,
    true_transition,
)
from ddctree.tree import Discretization


def _moves(panel, tree):
    pi = tree.apply(panel.q)
    src = np.flatnonzero(panel.successor >= 0)
    return pi[src], pi[panel.successor[src]]


def test_study1_truth_tables():
    t = sim1_truth(True, True)
    assert t.f_dc == (-7.0, -6.0, -5.0, -4.0) and t.f_tr == (0, 1, 2, 3)
    s = sim1_truth(False, False)
    assert s.f_dc == (-5.0,) * 4 and s.f_tr == (1,) * 4
    assert t.n_dims == 10 and t.tree.n_leaves == 4
    # (q1, q2) = (7, 2) falls in the high/low quadrant, leaf id 2
    assert t.tree.assign([7, 2] + [0] * 8) == 2
    np.testing.assert_allclose(t.volumes(), 0.25)


def test_random_discretization_rules():
    root = random_discretization(0, n_splits=0)
    assert root.f_dc == (-5.0,)
    one = random_discretization(0, n_splits=1, relevant_dims=30)
    (dim, thr), = one.tree.thresholds()
    assert thr == 5.0
    spec = random_discretization(42)
    assert spec.n_partitions == 15
    assert set(spec.tree.split_dims()) <= set(range(10))
    assert spec.f_tr == (1,) * 15
    assert set(random_discretization(42, dissimilar_transitions=True).f_tr) <= {0, 1, 2, 3}
    assert spec.tree.dumps() == random_discretization(42).tree.dumps()


def test_random_discretization_depth_profile():
    depths = np.concatenate([random_discretization(s).tree.leaf_depths() for s in range(100)])
    share = np.mean((depths >= 2) & (depths <= 6))
    assert share > 0.9


def test_sparse_cycles():
    spec = random_discretization(3)
    T = spec.q_matrix("sparse")
    order = list(spec.order)
    i = order.index(order[6])
    expect = {order[(i + s) % 15] for s in range(3)}
    assert set(np.flatnonzero(T[order[6]])) == expect
    np.testing.assert_allclose(T[order[6], list(expect)], 1 / 3)
    t1 = sim1_truth(True, True).q_matrix(QTransition.SPARSE)
    assert set(np.flatnonzero(t1[3])) == {3, 0}


def test_transition_q_stays_in_partition_under_none():
    spec = sim1_truth(True, True)
    rng = np.random.default_rng(0)
    for p in range(4):
        for _ in range(20):
            q = transition_q(p, "none", spec, rng)
            assert spec.tree.assign(q) == p
            assert np.all(q == np.floor(q)) and np.all((q >= 0) & (q <= 9))


def test_no_transition_keeps_partition():
    cfg = DgpConfig(sim1_truth(True, True), "none", n_buses=30, n_periods=30, seed=1)
    p = simulate(cfg)
    a, b = _moves(p, cfg.truth.tree)
    assert np.array_equal(a, b)


def test_sparse_stay_probability():
    cfg = DgpConfig(sim1_truth(True, True), "sparse", n_buses=400, n_periods=101, seed=2)
    a, b = _moves(simulate(cfg), cfg.truth.tree)
    assert a.size >= 40_000
    stay = np.mean(a == b)
    nxt = np.mean(b == (a + 1) % 4)
    assert abs(stay - 0.5) < 0.02 and abs(nxt - 0.5) < 0.02


def test_random_moves_independent():
    cfg = DgpConfig(sim1_truth(True, True), "random", n_buses=400, n_periods=101, seed=3)
    a, b = _moves(simulate(cfg), cfg.truth.tree)
    table = np.zeros((4, 4))
    np.add.at(table, (a, b), 1)
    assert chi2_contingency(table)[1] > 0.01


def test_mileage_law():
    x = np.array([1, 5, 19, 20, 20, 3])
    step = np.array([0, 1, 3, 1, 0, 2])
    rep = np.array([False, False, False, False, True, True])
    np.testing.assert_array_equal(_next_mileage(x, step, rep, 1, 20, 1), [1, 6, 20, 20, 1, 2])
    cfg = DgpConfig(sim1_truth(True, True), "random", n_buses=50, n_periods=60, seed=4)
    p = simulate(cfg)
    assert p.x.min() >= 1 and p.x.max() <= 20


def test_mileage_nondecreasing_until_replacement():
    cfg = DgpConfig(sim1_truth(False, False), "random", n_buses=40, n_periods=50, seed=5)
    p = simulate(cfg)
    src = np.flatnonzero((p.successor >= 0) & (p.d == 0))
    assert np.all(p.x[p.successor[src]] >= p.x[src])


def test_transition_rows_stochastic_and_ccp_monotone():
    for flags in ((True, True), (False, False)):
        for model in ("none", "random", "sparse"):
            cfg = DgpConfig(sim1_truth(*flags), model, n_buses=1, n_periods=1)
            G = true_transition(cfg)
            np.testing.assert_allclose(G.sum(axis=2), 1.0)
            P = true_ccp(cfg).reshape(20, 4, 2)
            assert np.all(P[18, :, 1] > P[1, :, 1])


def test_choice_frequencies_match_true_ccp():
    # one partition keeps the draws concentrated: the five lowest mileages get 100k+ rows each
    spec = TruePartitionSpec(Discretization.root(1), (-5.0,), (1,), (0,), (1.0,), (0.0,), (10.0,), integer=True)
    cfg = DgpConfig(spec, "none", n_buses=10_000, n_periods=100, seed=6)
    p = simulate(cfg)
    P = true_ccp(cfg)
    s = cfg.space.index(p.x, np.zeros(p.n_obs, dtype=np.int64))
    n = np.bincount(s, minlength=P.shape[0])
    r = np.bincount(s, weights=p.d, minlength=P.shape[0])
    busy = n >= 100_000
    assert busy.sum() >= 5
    assert np.max(np.abs(r[busy] / n[busy] - P[busy, 1])) < 0.01


def test_simulation_is_deterministic(tmp_path):
    cfg = DgpConfig(random_discretization(7), "sparse", n_buses=20, n_periods=15, seed=9)
    write_panel(simulate(cfg), tmp_path / "a.csv")
    write_panel(simulate(cfg), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    # each bus depends only on (seed, bus id)
    alone = simulate(cfg, [3])
    full = simulate(cfg)
    np.testing.assert_array_equal(alone.q, full.q[full.agent == 3])
    np.testing.assert_array_equal(alone.d, full.d[full.agent == 3])


def test_match_partitions():
    cfg = DgpConfig(sim1_truth(True, True), "random", n_buses=20, n_periods=20, seed=1)
    p = simulate(cfg)
    assert match_partitions(cfg.truth, cfg.truth.tree, p) == 4
    assert match_partitions(cfg.truth, Discretization.root(10), p) == 0
    half = Discretization.root(10).split(0, 0, 5.0).split(0, 1, 5.0)
    assert match_partitions(cfg.truth, half, p) == 2


def test_truth_json_roundtrip():
    spec = random_discretization(5, dissimilar_transitions=True)
    back = TruePartitionSpec.from_json(spec.to_json())
    assert back == spec


def test_config_validation():
    with pytest.raises(ValueError):
        DgpConfig(sim1_truth(True, True), "sideways")
    with pytest.raises(ValueError):
        DgpConfig(sim1_truth(True, True), beta=1.0)
    with pytest.raises(ValueError):
        TruePartitionSpec(Discretization.root(2), (-5.0,), (4,), (0,), (1.0,), (0, 0), (10, 10))
