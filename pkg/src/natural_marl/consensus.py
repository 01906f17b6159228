"""Communication graphs and consensus weight matrices for critic mixing."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Graph:
    n: int
    edges: frozenset  # of (i, j) with i < j

    def __post_init__(self):
        for i, j in self.edges:
            if i == j:
                raise ValueError("self-loop in edge set")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"vertex out of range in edge {(i, j)}")

    @classmethod
    def from_pairs(cls, n, pairs):
        return cls(n, frozenset((min(i, j), max(i, j)) for i, j in pairs))

    @classmethod
    def complete(cls, n):
        return cls(n, frozenset((i, j) for i in range(n) for j in range(i + 1, n)))

    def degrees(self):
        deg = np.zeros(self.n, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg


@dataclass(frozen=True)
class ConsensusMatrix:
    weights: np.ndarray
    gamma_floor: float

    @property
    def n(self):
        return self.weights.shape[0]


def _floor(w):
    pos = w[w > 0]
    return float(pos.min()) if pos.size else 1.0


def metropolis_weights(graph):
    n = graph.n
    if n < 1:
        raise ValueError("graph needs at least one vertex")
    deg = graph.degrees()
    w = np.zeros((n, n))
    for i, j in graph.edges:
        c = 1.0 / (1.0 + max(deg[i], deg[j]))
        w[i, j] = c
        w[j, i] = c
    w[np.diag_indices(n)] = 1.0 - w.sum(axis=1)
    return ConsensusMatrix(w, _floor(w))


def uniform_weights(n):
    """Constant 1/n mixing on the complete graph."""
    w = np.full((n, n), 1.0 / n)
    return ConsensusMatrix(w, 1.0 / n)


def random_graph(n, connectivity_ratio, rng):
    if n < 2:
        raise ValueError("random_graph needs n >= 2")
    if not (0.0 < connectivity_ratio <= 1.0):
        raise ValueError(f"connectivity_ratio must lie in (0, 1], got {connectivity_ratio}")
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < connectivity_ratio
    return Graph(n, frozenset(zip(iu[keep].tolist(), ju[keep].tolist())))


def _random_metropolis_array(n, ratio, rng):
    # array-only version of metropolis_weights(random_graph(...)) for the training loop;
    # consumes the same draws as random_graph
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < ratio
    a = np.zeros((n, n))
    a[iu[keep], ju[keep]] = 1.0
    a += a.T
    deg = a.sum(axis=1)
    w = a / (1.0 + np.maximum.outer(deg, deg))
    w[np.diag_indices(n)] = 1.0 - w.sum(axis=1)
    return w


def mix(matrix, locals_):
    w = matrix.weights if isinstance(matrix, ConsensusMatrix) else np.asarray(matrix)
    x = np.asarray(locals_, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
        squeeze = True
    else:
        squeeze = False
    if x.shape[0] != w.shape[0]:
        raise ValueError(f"{x.shape[0]} local vectors for a {w.shape[0]}-agent matrix")
    out = w @ x.reshape(x.shape[0], -1)
    out = out.reshape(x.shape)
    return out[:, 0] if squeeze else out


def disagreement(locals_):
    x = np.asarray(locals_, dtype=float)
    if x.size == 0 or x.shape[0] == 0:
        raise ValueError("disagreement of an empty set")
    x = x.reshape(x.shape[0], -1)
    return float(np.linalg.norm(x - x.mean(axis=0)))


def spectral_diagnostic(n, connectivity_ratio, rng, samples=500):
    """Sampled spectral norm of E[C^T (I - 11^T/n) C] for random Metropolis graphs.

    Values below one indicate contraction of the disagreement in expectation.
    """
    proj = np.eye(n) - np.full((n, n), 1.0 / n)
    acc = np.zeros((n, n))
    for _ in range(samples):
        c = _random_metropolis_array(n, connectivity_ratio, rng)
        acc += c.T @ proj @ c
    acc /= samples
    return float(np.linalg.norm(acc, 2))
