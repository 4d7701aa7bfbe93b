"""Incremental evaluation of every threshold on one (leaf, dimension) pair.

Observations of the leaf are moved, one at a time in sorted covariate order,
from the leaf's label to a fresh label. Each move touches a bounded number of
count cells, so the change in both objective parts is tracked exactly in
O(1) per observation. Counts are restored before returning.

Objective parts in terms of the count vectors:

    F_dc = sum phi(n_sc) - sum phi(n_state)
    F_tr = sum phi(n_t) - sum n_in * log(n_state) - sum phi(n_oc)

with phi(c) = c log c and n_in the number of transitions into a state.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = ["SplitContext", "phi_table"]


def phi_table(n: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(n + 2, dtype=np.float64)
    logc = np.zeros_like(c)
    logc[1:] = np.log(c[1:])
    return c * logc, logc


@njit(cache=True)
def _bump(arr, idx, step, phi):
    old = arr[idx]
    arr[idx] = old + step
    return phi[old + step] - phi[old]


@njit(cache=True)
def _state_tr(n_state, n_in, s, logc):
    return n_in[s] * logc[n_state[s]]


@njit(cache=True)
def _scan_kernel(order, sk0, sk1, sc0, sc1, succ, pred, tk, moved,
                 n_state, n_in, n_sc, n_oc, n_t, phi, logc):
    m = order.shape[0]
    dc_path = np.empty(m)
    tr_path = np.empty(m)
    dc = 0.0
    tr = 0.0
    for i in range(m):
        o = order[i]
        a = sk0[o]
        b = sk1[o]
        # state counts enter both parts
        dc += phi[n_state[a]] + phi[n_state[b]]
        tr += _state_tr(n_state, n_in, a, logc) + _state_tr(n_state, n_in, b, logc)
        n_state[a] -= 1
        n_state[b] += 1
        if pred[o] >= 0:
            n_in[a] -= 1
            n_in[b] += 1
        dc -= phi[n_state[a]] + phi[n_state[b]]
        tr -= _state_tr(n_state, n_in, a, logc) + _state_tr(n_state, n_in, b, logc)

        c0 = sc0[o]
        c1 = sc1[o]
        dc += _bump(n_sc, c0, -1, phi) + _bump(n_sc, c1, 1, phi)

        s = succ[o]
        if s >= 0:
            tr -= _bump(n_oc, c0, -1, phi) + _bump(n_oc, c1, 1, phi)
            ms = moved[s]
            tr += _bump(n_t, tk[o, ms, 0], -1, phi) + _bump(n_t, tk[o, ms, 1], 1, phi)
        r = pred[o]
        if r >= 0:
            mr = moved[r]
            tr += _bump(n_t, tk[r, 0, mr], -1, phi) + _bump(n_t, tk[r, 1, mr], 1, phi)
        moved[o] = 1
        dc_path[i] = dc
        tr_path[i] = tr

    # undo in reverse so every move sees the same neighbour flags it saw going forward
    for i in range(m - 1, -1, -1):
        o = order[i]
        a = sk0[o]
        b = sk1[o]
        n_state[a] += 1
        n_state[b] -= 1
        if pred[o] >= 0:
            n_in[a] += 1
            n_in[b] -= 1
        n_sc[sc0[o]] += 1
        n_sc[sc1[o]] -= 1
        s = succ[o]
        if s >= 0:
            n_oc[sc0[o]] += 1
            n_oc[sc1[o]] -= 1
            ms = moved[s]
            n_t[tk[o, ms, 0]] += 1
            n_t[tk[o, ms, 1]] -= 1
        r = pred[o]
        if r >= 0:
            mr = moved[r]
            n_t[tk[r, 0, mr]] += 1
            n_t[tk[r, 1, mr]] -= 1
        moved[o] = 0
    return dc_path, tr_path


class SplitContext:
    """Count state of a panel under a fixed labeling, ready for leaf scans.

    Parameters
    ----------
    x_index, d, succ, pred : int arrays, shape (n_obs,)
    labels : int array, shape (n_obs,)
        Current partition of every observation, values in ``0..k-1``.
    k : int
        Number of partitions; the scan uses label ``k`` for the new child.
    n_x, n_choices : int
    """

    def __init__(self, x_index, d, succ, pred, labels, k, n_x, n_choices, phi=None, logc=None):
        n = x_index.shape[0]
        K1 = k + 1
        J = n_choices
        n_states = n_x * K1
        self.labels = labels
        self.k = k
        self.succ = succ
        self.pred = pred
        self.sk0 = x_index * K1 + labels
        self.sk1 = x_index * K1 + k
        self.sc0 = self.sk0 * J + d
        self.sc1 = self.sk1 * J + d

        src = np.flatnonzero(succ >= 0)
        dst = succ[src]
        width = n_states * J
        raw = np.empty((src.shape[0], 2, 2), dtype=np.int64)
        for ms, dest in ((0, self.sk0[dst]), (1, self.sk1[dst])):
            raw[:, ms, 0] = dest * width + self.sc0[src]
            raw[:, ms, 1] = dest * width + self.sc1[src]
        uniq, inv = np.unique(raw.ravel(), return_inverse=True)
        tk = np.full((n, 2, 2), -1, dtype=np.int64)
        tk[src] = inv.reshape(-1, 2, 2)
        self.tk = tk

        has_pred = pred >= 0
        self.n_state = np.bincount(self.sk0, minlength=n_states).astype(np.int64)
        self.n_in = np.bincount(self.sk0[has_pred], minlength=n_states).astype(np.int64)
        self.n_sc = np.bincount(self.sc0, minlength=n_states * J).astype(np.int64)
        self.n_oc = np.bincount(self.sc0[src], minlength=n_states * J).astype(np.int64)
        self.n_t = np.bincount(tk[src, 0, 0], minlength=uniq.shape[0]).astype(np.int64)
        self.moved = np.zeros(n, dtype=np.int64)
        if phi is None:
            phi, logc = phi_table(n)
        self.phi = phi
        self.logc = logc

    def scan(self, order: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cumulative (delta F_dc, delta F_tr) after moving ``order[:i+1]``."""
        return _scan_kernel(
            order, self.sk0, self.sk1, self.sc0, self.sc1, self.succ, self.pred, self.tk,
            self.moved, self.n_state, self.n_in, self.n_sc, self.n_oc, self.n_t,
            self.phi, self.logc,
        )
