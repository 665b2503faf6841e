"""Communication graphs, Metropolis mixing matrices and consensus mixing."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg
from scipy.sparse.csgraph import connected_components

from .errors import DimensionMismatch, DisconnectedGraph, InvalidTopology, NotDoublyStochastic

KINDS = ("ring", "fully_connected", "bipartite", "custom")
STOCHASTIC_TOL = 1e-12


def _normalize_edges(n, edges):
    out = set()
    for e in edges:
        if len(e) != 2:
            raise InvalidTopology(f"edge {e!r} does not have two endpoints")
        i, j = int(e[0]), int(e[1])
        if i == j:
            raise InvalidTopology(f"self-loop ({i}, {j}) is not allowed")
        if not (0 <= i < n and 0 <= j < n):
            raise InvalidTopology(f"edge ({i}, {j}) out of range for n={n}")
        out.add((min(i, j), max(i, j)))
    return frozenset(out)


def metropolis_weights(n: int, edges) -> np.ndarray:
    """Metropolis-Hastings weights for a simple undirected graph on n vertices.

    W_ij = 1 / (1 + max(deg_i, deg_j)) on edges and the diagonal absorbs the rest,
    so W is symmetric and doubly stochastic by construction.
    """
    edges = _normalize_edges(n, edges)
    deg = np.zeros(n, dtype=int)
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
    W = np.zeros((n, n))
    for i, j in edges:
        w = 1.0 / (1.0 + max(deg[i], deg[j]))
        W[i, j] = w
        W[j, i] = w
    for i in range(n):
        W[i, i] = 1.0 - (W[i].sum() - W[i, i])
    return W


def is_connected(n: int, edges) -> bool:
    if n == 1:
        return True
    adj = np.zeros((n, n))
    for i, j in edges:
        adj[i, j] = adj[j, i] = 1.0
    count, _ = connected_components(adj, directed=False)
    return count == 1


@dataclass(frozen=True)
class CommNetwork:
    n: int
    edges: frozenset
    weights: np.ndarray = field(repr=False)
    kind: str = "custom"

    def __post_init__(self):
        self.weights.setflags(write=False)

    @property
    def W(self) -> np.ndarray:
        return self.weights

    def neighbors(self, i: int) -> list[int]:
        """Neighbor set including i itself."""
        return [j for j in range(self.n) if j == i or self.weights[i, j] > 0]

    @property
    def rho(self) -> float:
        return spectral_rho(self.weights)


def build_topology(kind: str, n: int, custom_edges=None) -> CommNetwork:
    if n < 1:
        raise InvalidTopology(f"n must be >= 1, got {n}")
    if kind == "ring":
        if n < 3:
            raise InvalidTopology(f"ring requires n >= 3, got {n}")
        edges = [(i, (i + 1) % n) for i in range(n)]
    elif kind == "fully_connected":
        edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    elif kind == "bipartite":
        if n < 2:
            raise InvalidTopology(f"bipartite requires n >= 2, got {n}")
        left = (n + 1) // 2
        edges = [(i, j) for i in range(left) for j in range(left, n)]
    elif kind == "custom":
        if custom_edges is None:
            raise InvalidTopology("custom topology needs an edge list")
        edges = list(custom_edges)
    else:
        raise InvalidTopology(f"unknown topology kind {kind!r}; expected one of {KINDS}")

    edges = _normalize_edges(n, edges)
    if not is_connected(n, edges):
        raise DisconnectedGraph(f"{kind} graph on {n} agents is not connected")
    return CommNetwork(n=n, edges=edges, weights=metropolis_weights(n, edges), kind=kind)


def load_edge_file(path) -> list[tuple[int, int]]:
    """Read one whitespace-separated zero-based edge per line; '#' lines are comments."""
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise InvalidTopology(f"{path}:{lineno}: expected two integers, got {raw!r}")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise InvalidTopology(f"{path}:{lineno}: non-integer vertex in {raw!r}") from None
    return edges


def check_doubly_stochastic(W: np.ndarray, tol: float = STOCHASTIC_TOL) -> None:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise NotDoublyStochastic(f"W must be square, got shape {W.shape}")
    rows = np.abs(W.sum(axis=1) - 1.0).max()
    cols = np.abs(W.sum(axis=0) - 1.0).max()
    if rows > tol or cols > tol:
        raise NotDoublyStochastic(f"row/column sum error {max(rows, cols):.3e} exceeds {tol:.0e}")
    if (W < 0).any():
        raise NotDoublyStochastic("W has negative entries")


def _lanczos_rho(M, tol=1e-12):
    vals = scipy.sparse.linalg.eigsh(M, k=1, which="LM", tol=tol, return_eigenvectors=False,
                                     v0=np.ones(M.shape[0]) / np.sqrt(M.shape[0]) + 1e-3 * np.arange(M.shape[0]))
    return float(abs(vals[0]))


def spectral_rho(W: np.ndarray) -> float:
    """Spectral norm of W - J/n, the per-round consensus contraction factor."""
    W = np.asarray(W, dtype=float)
    check_doubly_stochastic(W)
    n = W.shape[0]
    M = W - np.full((n, n), 1.0 / n)
    if np.allclose(W, W.T, atol=1e-14, rtol=0):
        M = 0.5 * (M + M.T)
        if n > 64:
            return _lanczos_rho(M)
        return float(np.abs(np.linalg.eigvalsh(M)).max())
    return float(np.linalg.norm(M, ord=2))


def mix(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """One consensus round (W kron I_d) x on stacked per-agent vectors.

    ``x`` may be an (n, d) array of blocks or a flat vector of length n*d; the
    output has the same shape.
    """
    W = np.asarray(W)
    x = np.asarray(x, dtype=float)
    n = W.shape[0]
    if x.ndim == 1:
        if x.size % n:
            raise DimensionMismatch(f"length {x.size} is not a multiple of n={n}")
        return (W @ x.reshape(n, -1)).reshape(-1)
    if x.ndim != 2 or x.shape[0] != n:
        raise DimensionMismatch(f"expected {n} blocks, got shape {x.shape}")
    return W @ x


def consensus_error(x: np.ndarray) -> float:
    """Frobenius distance of stacked blocks from their blockwise mean."""
    x = np.asarray(x, dtype=float)
    return float(np.linalg.norm(x - x.mean(axis=0, keepdims=True)))
