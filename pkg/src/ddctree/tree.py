"""Axis-aligned binary trees mapping covariate vectors to partition ids."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Node", "Discretization", "TreeFormatError"]


class TreeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    """One tree node.

    Internal nodes carry ``dim``/``threshold``/``left``/``right``; a row goes
    left iff ``q[dim] < threshold``. Leaves carry ``leaf_id``.
    """

    dim: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    leaf_id: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


class Discretization:
    """Partition of the covariate space given by an axis-aligned binary tree.

    Node 0 is the root. Leaf ids are dense ``0..k-1`` and assigned in
    depth-first, left-first order, so the id of a region depends only on the
    shape of the tree and not on the order in which splits were made.
    Dimensions are 0-based column indices into ``q``.
    """

    def __init__(self, nodes=None, n_dims: int | None = None):
        nodes = list(nodes) if nodes else [Node(leaf_id=0)]
        self.n_dims = n_dims
        self.nodes = tuple(self._relabel(nodes))
        self._check()

    @staticmethod
    def _relabel(nodes):
        out = list(nodes)
        stack, next_id = [0], 0
        while stack:
            i = stack.pop()
            nd = out[i]
            if nd.is_leaf:
                out[i] = Node(leaf_id=next_id)
                next_id += 1
            else:
                stack.append(nd.right)
                stack.append(nd.left)
        return out

    def _check(self):
        seen = set()
        stack = [0]
        while stack:
            i = stack.pop()
            if i in seen or not 0 <= i < len(self.nodes):
                raise TreeFormatError(f"node {i} is referenced twice or does not exist")
            seen.add(i)
            nd = self.nodes[i]
            if not nd.is_leaf:
                if nd.right < 0 or nd.dim < 0:
                    raise TreeFormatError(f"internal node {i} is incomplete")
                if self.n_dims is not None and nd.dim >= self.n_dims:
                    raise TreeFormatError(f"node {i} splits on dim {nd.dim} >= n_dims {self.n_dims}")
                stack.extend((nd.left, nd.right))
        if len(seen) != len(self.nodes):
            raise TreeFormatError("tree contains unreachable nodes")

    @classmethod
    def root(cls, n_dims: int | None = None) -> Discretization:
        return cls([Node(leaf_id=0)], n_dims=n_dims)

    @property
    def n_leaves(self) -> int:
        return sum(1 for nd in self.nodes if nd.is_leaf)

    @property
    def n_splits(self) -> int:
        return len(self.nodes) - self.n_leaves

    def leaf_node(self, leaf_id: int) -> int:
        for i, nd in enumerate(self.nodes):
            if nd.is_leaf and nd.leaf_id == leaf_id:
                return i
        raise KeyError(f"no leaf {leaf_id}")

    def split(self, leaf_id: int, dim: int, threshold: float) -> Discretization:
        """Return a new tree with leaf ``leaf_id`` split at ``q[dim] < threshold``."""
        if self.n_dims is not None and not 0 <= dim < self.n_dims:
            raise ValueError(f"dim {dim} outside 0..{self.n_dims - 1}")
        i = self.leaf_node(leaf_id)
        nodes = list(self.nodes)
        n = len(nodes)
        nodes[i] = Node(dim=int(dim), threshold=float(threshold), left=n, right=n + 1)
        nodes += [Node(leaf_id=0), Node(leaf_id=0)]
        return Discretization(nodes, n_dims=self.n_dims)

    def assign(self, q) -> int:
        """Partition id of a single covariate vector."""
        q = np.asarray(q, dtype=np.float64).ravel()
        if self.n_dims is not None and q.shape[0] != self.n_dims:
            raise ValueError(f"expected a vector of length {self.n_dims}, got {q.shape[0]}")
        nd = self.nodes[0]
        while not nd.is_leaf:
            if nd.dim >= q.shape[0]:
                raise ValueError(f"vector of length {q.shape[0]} has no dim {nd.dim}")
            nd = self.nodes[nd.left if q[nd.dim] < nd.threshold else nd.right]
        return nd.leaf_id

    def apply(self, Q) -> np.ndarray:
        """Vectorised :meth:`assign` over the rows of ``Q``."""
        Q = np.asarray(Q, dtype=np.float64)
        if Q.ndim == 1:
            Q = Q.reshape(1, -1)
        if self.n_dims is not None and Q.shape[1] != self.n_dims:
            raise ValueError(f"expected {self.n_dims} columns, got {Q.shape[1]}")
        out = np.empty(Q.shape[0], dtype=np.int64)
        stack = [(0, np.arange(Q.shape[0]))]
        while stack:
            i, rows = stack.pop()
            nd = self.nodes[i]
            if nd.is_leaf:
                out[rows] = nd.leaf_id
                continue
            if nd.dim >= Q.shape[1]:
                raise ValueError(f"input has no dim {nd.dim}")
            go_left = Q[rows, nd.dim] < nd.threshold
            stack.append((nd.left, rows[go_left]))
            stack.append((nd.right, rows[~go_left]))
        return out

    def leaf_bounds(self, leaf_id: int, lower, upper) -> tuple[np.ndarray, np.ndarray]:
        """Box ``[lo, hi)`` of a leaf, starting from root box ``[lower, upper)``."""
        lo = np.array(lower, dtype=np.float64)
        hi = np.array(upper, dtype=np.float64)
        target = self.leaf_node(leaf_id)
        path = self._path_to(target)
        for parent, went_left in path:
            nd = self.nodes[parent]
            if went_left:
                hi[nd.dim] = min(hi[nd.dim], nd.threshold)
            else:
                lo[nd.dim] = max(lo[nd.dim], nd.threshold)
        return lo, hi

    def leaf_depths(self) -> np.ndarray:
        """Number of splits above each leaf, indexed by leaf id."""
        depth = np.zeros(self.n_leaves, dtype=np.int64)
        stack = [(0, 0)]
        while stack:
            i, dep = stack.pop()
            nd = self.nodes[i]
            if nd.is_leaf:
                depth[nd.leaf_id] = dep
            else:
                stack += [(nd.left, dep + 1), (nd.right, dep + 1)]
        return depth

    def split_dims(self) -> list[int]:
        return [nd.dim for nd in self.nodes if not nd.is_leaf]

    def thresholds(self) -> list[tuple[int, float]]:
        return [(nd.dim, nd.threshold) for nd in self.nodes if not nd.is_leaf]

    def _path_to(self, target: int):
        parent = {}
        for i, nd in enumerate(self.nodes):
            if not nd.is_leaf:
                parent[nd.left] = (i, True)
                parent[nd.right] = (i, False)
        path = []
        while target in parent:
            p, left = parent[target]
            path.append((p, left))
            target = p
        return path[::-1]

    # -- serialization -------------------------------------------------

    def dumps(self) -> str:
        """Text form: a header line then one line per node.

        ``node <id> split <dim> <threshold> <left> <right>`` or
        ``node <id> leaf <partition id>``. Thresholds use ``float.hex`` so a
        round trip is exact.
        """
        lines = [f"discretization v1 n_dims={'-' if self.n_dims is None else self.n_dims} nodes={len(self.nodes)}"]
        for i, nd in enumerate(self.nodes):
            if nd.is_leaf:
                lines.append(f"node {i} leaf {nd.leaf_id}")
            else:
                lines.append(
                    f"node {i} split {nd.dim} {float(nd.threshold).hex()} {nd.left} {nd.right}"
                )
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> Discretization:
        lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        if not lines or not lines[0].startswith("discretization v1"):
            raise TreeFormatError("missing 'discretization v1' header")
        meta = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
        n_dims = None if meta.get("n_dims", "-") == "-" else int(meta["n_dims"])
        n_nodes = int(meta["nodes"])
        nodes: list[Node | None] = [None] * n_nodes
        for ln_no, ln in enumerate(lines[1:], start=2):
            tok = ln.split()
            try:
                if tok[0] != "node":
                    raise ValueError
                i = int(tok[1])
                if tok[2] == "leaf":
                    nodes[i] = Node(leaf_id=int(tok[3]))
                elif tok[2] == "split":
                    nodes[i] = Node(
                        dim=int(tok[3]),
                        threshold=float.fromhex(tok[4]),
                        left=int(tok[5]),
                        right=int(tok[6]),
                    )
                else:
                    raise ValueError
            except (ValueError, IndexError):
                raise TreeFormatError(f"line {ln_no}: cannot parse {ln!r}") from None
        if any(nd is None for nd in nodes):
            raise TreeFormatError("node table has holes")
        disc = cls(nodes, n_dims=n_dims)
        for a, b in zip(disc.nodes, nodes):
            if a.is_leaf and a.leaf_id != b.leaf_id:
                raise TreeFormatError("leaf ids are not in depth-first order")
        return disc

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> Discretization:
        return cls.loads(Path(path).read_text())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Discretization):
            return NotImplemented
        return self.nodes == other.nodes and self.n_dims == other.n_dims

    def __hash__(self):
        return hash(self.nodes)

    def __repr__(self) -> str:
        return f"Discretization(n_leaves={self.n_leaves}, splits={self.thresholds()})"
