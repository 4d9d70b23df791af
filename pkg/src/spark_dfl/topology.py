"""Time-variant random kappa-regular graphs from the pairing model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation

MAX_PAIRING_ATTEMPTS = 20
MAX_REPAIR_ATTEMPTS = 1000


@dataclass(frozen=True)
class RoundGraph:
    round: int
    degree: int
    seed: int
    adjacency: tuple[tuple[int, ...], ...]

    @property
    def num_clients(self) -> int:
        return len(self.adjacency)

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, nbrs in enumerate(self.adjacency) for j in nbrs if i < j]

    def is_connected(self) -> bool:
        if not self.adjacency:
            return True
        seen = {0}
        stack = [0]
        while stack:
            for j in self.adjacency[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == self.num_clients

    def edge_list_text(self) -> str:
        return "".join(f"{i} {j}\n" for i, j in self.edges())


def _pairing(stubs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random perfect matching of the stubs as an ``(E, 2)`` array, smaller end first."""
    perm = rng.permutation(stubs).reshape(-1, 2)
    return np.sort(perm, axis=1)


def _keys(pairs: np.ndarray, m: int) -> np.ndarray:
    return pairs[:, 0].astype(np.int64) * m + pairs[:, 1]


def _is_simple(pairs: np.ndarray, m: int) -> bool:
    if np.any(pairs[:, 0] == pairs[:, 1]):
        return False
    return np.unique(_keys(pairs, m)).size == len(pairs)


def _repair(pairs: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray | None:
    """Remove self-loops and multi-edges with degree-preserving double edge swaps.

    Returns None when the swaps get stuck (possible for dense graphs).
    """
    keys = _keys(pairs, m)
    _, first = np.unique(keys, return_index=True)
    keep = np.zeros(len(pairs), dtype=bool)
    keep[first] = True
    keep &= pairs[:, 0] != pairs[:, 1]
    good = list(map(tuple, pairs[keep].tolist()))
    bad = list(map(tuple, pairs[~keep].tolist()))
    pos = {e: i for i, e in enumerate(good)}
    limit = 50 * (len(pairs) + 1)
    tries = 0
    while bad:
        if tries >= limit or not good:
            return None
        # uniform draws in bulk: an edge slot and an orientation per try
        draws = rng.random((min(4096, limit - tries), 2)).tolist()
        for pick, flip in draws:
            tries += 1
            u, v = bad[-1]
            x, y = good[int(pick * len(good))]
            if flip < 0.5:
                x, y = y, x
            # replace {u, v} and {x, y} with {u, x} and {v, y}
            e1 = (u, x) if u < x else (x, u)
            e2 = (v, y) if v < y else (y, v)
            if u == x or v == y or e1 == e2 or e1 in pos or e2 in pos:
                continue
            slot = pos.pop((x, y) if x < y else (y, x))
            good[slot] = e1
            pos[e1] = slot
            pos[e2] = len(good)
            good.append(e2)
            bad.pop()
            if not bad:
                break
    return np.array(good, dtype=np.int64).reshape(-1, 2)


def _sample_edges(m: int, kappa: int, rng: np.random.Generator) -> np.ndarray:
    stubs = np.repeat(np.arange(m), kappa)
    # a plain pairing is simple with probability about exp((1 - kappa^2) / 4),
    # so dense graphs go straight to repair
    attempts = MAX_PAIRING_ATTEMPTS if kappa <= 5 else 1
    for _ in range(attempts):
        pairs = _pairing(stubs, rng)
        if _is_simple(pairs, m):
            return pairs
    edges = _repair(pairs, m, rng)
    for _ in range(MAX_REPAIR_ATTEMPTS):
        if edges is not None:
            return edges
        edges = _repair(_pairing(stubs, rng), m, rng)
    raise ConfigurationError(f"failed to sample a {kappa}-regular graph on {m} vertices")


def generate(num_clients: int, degree: int, round_index: int, base_seed: int) -> RoundGraph:
    """Random simple ``degree``-regular graph, fully determined by its arguments.

    Up to ``MAX_PAIRING_ATTEMPTS`` plain pairings are tried; if none is
    simple, fresh pairings are repaired with edge swaps until one succeeds.
    Graphs denser than half the clients are sampled as the complement of a
    sparse regular graph.
    """
    m, kappa = int(num_clients), int(degree)
    if m < 1 or kappa < 0:
        raise ConfigurationError("need num_clients >= 1 and degree >= 0")
    if kappa >= m:
        raise ConfigurationError(f"degree {kappa} must be smaller than the client count {m}")
    if (m * kappa) % 2:
        raise ConfigurationError(f"num_clients * degree must be even, got {m} * {kappa}")
    rng = np.random.default_rng([base_seed & 0xFFFFFFFFFFFFFFFF, round_index])
    complement = 2 * kappa > m - 1
    edges = _sample_edges(m, m - 1 - kappa if complement else kappa, rng)
    adj = np.zeros((m, m), dtype=bool)
    adj[edges[:, 0], edges[:, 1]] = adj[edges[:, 1], edges[:, 0]] = True
    if complement:
        adj = ~adj
        np.fill_diagonal(adj, False)
    # every row holds exactly kappa entries, in increasing column order
    cols = np.nonzero(adj)[1].reshape(m, kappa)
    return RoundGraph(round_index, kappa, base_seed, tuple(map(tuple, cols.tolist())))


def neighbors(graph: RoundGraph, i: int) -> list[int]:
    if not 0 <= i < graph.num_clients:
        raise ContractViolation(f"unknown client {i}")
    return list(graph.adjacency[i])
