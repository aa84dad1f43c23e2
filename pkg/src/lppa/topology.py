"""Directed communication graphs and doubly stochastic aggregation weights."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConvergenceError, ParameterError, TopologyError


@dataclass(frozen=True)
class Digraph:
    """Communication graph over clients ``0 .. n-1``.

    ``out_neighbors[i]`` are the clients that receive from ``i`` and
    ``in_neighbors[i]`` the clients ``i`` receives from.  Both always contain
    ``i`` itself and are sorted by client id.
    """

    n: int
    out_neighbors: tuple
    in_neighbors: tuple

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[int]], check_connected=True):
        n = int(n)
        if n < 1:
            raise ParameterError(f"client count must be >= 1, got {n}")
        out_sets = [{i} for i in range(n)]
        in_sets = [{i} for i in range(n)]
        for edge in edges:
            if len(edge) != 2:
                raise TopologyError(f"edge must be a [from, to] pair, got {edge!r}")
            src, dst = int(edge[0]), int(edge[1])
            if not (0 <= src < n and 0 <= dst < n):
                raise TopologyError(f"edge {src}->{dst} outside 0..{n - 1}")
            out_sets[src].add(dst)
            in_sets[dst].add(src)
        g = cls(
            n,
            tuple(tuple(sorted(s)) for s in out_sets),
            tuple(tuple(sorted(s)) for s in in_sets),
        )
        if check_connected and not is_strongly_connected(g):
            raise TopologyError("communication graph is not strongly connected")
        return g

    def edges(self, self_loops: bool = False):
        """Directed edges ``(sender, receiver)`` in sender-then-receiver order."""
        return [
            (i, l)
            for i in range(self.n)
            for l in self.out_neighbors[i]
            if self_loops or l != i
        ]

    def adjacency(self) -> np.ndarray:
        """0/1 matrix with ``A[i, j] = 1`` iff ``j`` sends to ``i`` (incl. self)."""
        a = np.zeros((self.n, self.n))
        for i in range(self.n):
            a[i, list(self.in_neighbors[i])] = 1.0
        return a


def is_strongly_connected(g: Digraph) -> bool:
    def reaches_all(neighbors):
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in neighbors[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == g.n

    if g.n == 0:
        return False
    return reaches_all(g.out_neighbors) and reaches_all(g.in_neighbors)


def build_topology(kind: str, n: int | None = None, edges=None) -> Digraph:
    """Build a ``full``, ``ring`` or ``custom`` topology with self-loops.

    The ring sends ``i -> i+1 (mod n)``.
    """
    if kind == "custom":
        if edges is None or n is None:
            raise ParameterError("custom topology needs n and an edge list")
        return Digraph.from_edges(n, edges)
    if n is None or int(n) < 2:
        raise ParameterError(f"topology needs n >= 2, got {n}")
    n = int(n)
    if kind == "full":
        edges = [(i, j) for i in range(n) for j in range(n) if i != j]
    elif kind == "ring":
        edges = [(i, (i + 1) % n) for i in range(n)]
    else:
        raise ParameterError(f"unknown topology kind {kind!r}")
    return Digraph.from_edges(n, edges)


def load_topology(path) -> Digraph:
    """Read ``{"n": int, "edges": [[from, to], ...]}``; self-loops are implicit."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise TopologyError(f"cannot read topology file {path}: {exc}") from exc
    if not isinstance(payload, dict) or "n" not in payload or "edges" not in payload:
        raise TopologyError("topology file needs keys 'n' and 'edges'")
    return Digraph.from_edges(payload["n"], payload["edges"])


def save_topology(g: Digraph, path) -> None:
    payload = {"n": g.n, "edges": [list(e) for e in g.edges()]}
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


@dataclass(frozen=True)
class WeightMatrix:
    w: np.ndarray
    iterations: int = 0
    residual: float = 0.0
    graph: Digraph | None = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.w if dtype is None else self.w.astype(dtype)


def _stochastic_residual(m: np.ndarray) -> float:
    return max(np.abs(m.sum(axis=1) - 1).max(), np.abs(m.sum(axis=0) - 1).max())


def sinkhorn_knopp(g: Digraph, tol: float = 1e-10, max_iter: int = 10_000) -> WeightMatrix:
    """Balance the 0/1 adjacency of ``g`` into a doubly stochastic matrix.

    Rows and columns are normalised alternately until both sets of sums are
    within ``tol`` of one.  Zeros of the adjacency stay exactly zero.
    """
    if tol <= 0 or max_iter < 1:
        raise ParameterError("tol must be positive and max_iter >= 1")
    m = g.adjacency()
    residual = _stochastic_residual(m)
    it = 0
    while residual > tol:
        if it >= max_iter:
            raise ConvergenceError(
                f"Sinkhorn-Knopp did not reach tol={tol} in {max_iter} iterations "
                f"(residual {residual:.3e})",
                residual=residual,
            )
        m = m / m.sum(axis=1, keepdims=True)
        m = m / m.sum(axis=0, keepdims=True)
        it += 1
        residual = _stochastic_residual(m)
    m.setflags(write=False)
    return WeightMatrix(m, iterations=it, residual=float(residual), graph=g)
