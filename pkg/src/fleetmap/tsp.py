"""Planar TSP playground: classic construction heuristics, 2-opt, and
model-guided tours over points in the unit square.

The network consumes the same kind of inputs it sees on road graphs (a
per-node feature block plus a normalized distance matrix), built here
from the complete Euclidean graph.  Tours are closed; lengths are plain
Euclidean sums.
"""

from __future__ import annotations

import numpy as np

from .autodiff import constant
from .nn import ParamStore
from .policy import (
    PolicyConfig,
    decode_and_select,
    decode_values,
    encode,
    row_normalized_adjacency,
    value_iterate,
)

DEFAULT_SAMPLE_ROLLOUTS = 1280


def random_points(k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(k, 2))


def distance_matrix(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def tour_length(D: np.ndarray, order) -> float:
    """Closed tour length visiting ``order`` and returning to its head."""
    order = list(order)
    if sorted(order) != list(range(D.shape[0])):
        raise ValueError("order must visit every point exactly once")
    total = 0.0
    for a, b in zip(order, order[1:] + order[:1]):
        total += D[a, b]
    return float(total)


def _check_k(k: int) -> None:
    if k < 3:
        raise ValueError(f"need at least 3 points, got {k}")


def nearest_neighbour(D: np.ndarray, start: int = 0) -> list[int]:
    """Always walk to the closest unvisited point, then close the tour."""
    k = D.shape[0]
    _check_k(k)
    order = [start]
    unvisited = set(range(k)) - {start}
    while unvisited:
        cur = order[-1]
        nxt = min(unvisited, key=lambda v: (D[cur, v], v))
        order.append(nxt)
        unvisited.remove(nxt)
    return order


def _insert_cheapest(D: np.ndarray, order: list[int], v: int) -> None:
    best_pos, best_delta = 0, np.inf
    for pos in range(len(order)):
        a = order[pos]
        b = order[(pos + 1) % len(order)]
        delta = D[a, v] + D[v, b] - D[a, b]
        if delta < best_delta - 1e-15:
            best_pos, best_delta = pos + 1, delta
    order.insert(best_pos, v)


def _insertion(D: np.ndarray, pick) -> list[int]:
    k = D.shape[0]
    _check_k(k)
    first = 0
    second = int(np.argmin(np.where(np.arange(k) == first, np.inf, D[first])))
    order = [first, second]
    remaining = [v for v in range(k) if v not in order]
    while remaining:
        v = pick(order, remaining)
        remaining.remove(v)
        _insert_cheapest(D, order, v)
    return order


def nearest_insertion(D: np.ndarray) -> list[int]:
    """Grow the tour with the point closest to it."""
    return _insertion(
        D, lambda order, rem: min(rem, key=lambda v: (min(D[v, u] for u in order), v))
    )


def farthest_insertion(D: np.ndarray) -> list[int]:
    """Grow the tour with the point farthest from it."""
    return _insertion(
        D, lambda order, rem: max(rem, key=lambda v: (min(D[v, u] for u in order), -v))
    )


def random_insertion(D: np.ndarray, rng: np.random.Generator) -> list[int]:
    """Grow the tour with uniformly chosen points."""
    return _insertion(D, lambda order, rem: rem[int(rng.integers(len(rem)))])


def two_opt(D: np.ndarray, order: list[int], move_budget: int | None = None) -> list[int]:
    """Segment-reversal hill climbing; every accepted move strictly
    shortens the tour."""
    k = len(order)
    order = list(order)
    if move_budget is None:
        move_budget = 10 * k * k
    cost = tour_length(D, order)
    moves = 0
    improved = True
    while improved and moves < move_budget:
        improved = False
        for i in range(k - 1):
            for j in range(i + 1, k):
                cand = order[:i] + order[i : j + 1][::-1] + order[j + 1 :]
                new_cost = tour_length(D, cand)
                if new_cost < cost - 1e-12:
                    assert new_cost < cost, "2-opt accepted a non-improving move"
                    order, cost = cand, new_cost
                    moves += 1
                    improved = True
    return order


HEURISTICS = ("nearest-insertion", "farthest-insertion", "random-insertion", "nearest-neighbour")


def heuristic_tour(D: np.ndarray, method: str, rng: np.random.Generator | None = None, refine: bool = False) -> list[int]:
    if method == "nearest-insertion":
        order = nearest_insertion(D)
    elif method == "farthest-insertion":
        order = farthest_insertion(D)
    elif method == "random-insertion":
        if rng is None:
            raise ValueError("random-insertion needs a random generator")
        order = random_insertion(D, rng)
    elif method == "nearest-neighbour":
        order = nearest_neighbour(D)
    else:
        raise ValueError(f"unknown TSP method {method!r}")
    return two_opt(D, order) if refine else order


def best_found(D: np.ndarray, seed: int = 0) -> float:
    """Best tour over every heuristic with 2-opt refinement; the
    reference the benchmark reports gaps against."""
    rng = np.random.default_rng(seed)
    best = np.inf
    for method in HEURISTICS:
        order = heuristic_tour(D, method, rng=rng, refine=True)
        best = min(best, tour_length(D, order))
    return float(best)


# ---------------------------------------------------------------------------
# Model-guided tours
# ---------------------------------------------------------------------------


def _tsp_features(D: np.ndarray, cur: int, visited: np.ndarray) -> np.ndarray:
    """Feature block mirroring the road-graph layout over a complete graph."""
    k = D.shape[0]
    X = np.zeros((k, 10))
    mean_dist = D.sum(axis=0) / (k - 1)
    X[:, 0] = mean_dist
    X[:, 1] = mean_dist
    X[:, 2] = 1.0
    X[:, 3] = 1.0
    X[cur, 4] = 1.0
    X[:, 5] = (~visited).astype(float)
    X[:, 6] = visited.astype(float)
    row = D[cur]
    span = row.max() - row.min()
    X[:, 7] = (row - row.min()) / span if span > 0 else 0.0
    X[:, 9] = 1.0
    X[cur, 9] = 0.0
    return X


def _normalized(D: np.ndarray) -> np.ndarray:
    sigma = D.std()
    return (D - D.mean()) / sigma if sigma > 0 else np.zeros_like(D)


def model_tour(
    store: ParamStore,
    cfg: PolicyConfig,
    D: np.ndarray,
    start: int = 0,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    K: int | None = None,
) -> list[int]:
    """Roll the planner over the point set from ``start``."""
    k = D.shape[0]
    _check_k(k)
    A = _normalized(D) if cfg.dense_adjacency else np.ones((k, k)) - np.eye(k)
    row_mix = None if cfg.attention else row_normalized_adjacency(np.ones((k, k)) - np.eye(k))
    visited = np.zeros(k, dtype=bool)
    visited[start] = True
    order = [start]
    U0 = np.zeros((k, cfg.channels))
    while not visited.all():
        X = _tsp_features(D, order[-1], visited)
        X0 = encode(store, constant(X), constant(U0))
        XK = value_iterate(store, cfg, X0, A, K=K, row_mix=row_mix)
        chosen, _ = decode_and_select(decode_values(store, XK), ~visited, mode=mode, rng=rng)
        visited[chosen] = True
        order.append(chosen)
    return order


def model_tour_ss(store: ParamStore, cfg: PolicyConfig, D: np.ndarray, K: int | None = None) -> tuple[list[int], float]:
    """Self-starting: greedy tours from every start, keep the shortest."""
    best_order, best_len = None, np.inf
    for start in range(D.shape[0]):
        order = model_tour(store, cfg, D, start=start, mode="greedy", K=K)
        length = tour_length(D, order)
        if length < best_len - 1e-15:
            best_order, best_len = order, length
    return best_order, float(best_len)


def model_tour_ss_sp(
    store: ParamStore,
    cfg: PolicyConfig,
    D: np.ndarray,
    samples: int = DEFAULT_SAMPLE_ROLLOUTS,
    seed: int = 0,
    K: int | None = None,
) -> tuple[list[int], float]:
    """Self-start plus sampling: the greedy all-starts sweep plus
    ``samples`` stochastic rollouts (starts cycled); global minimum.
    Never worse than the plain self-starting tour by construction."""
    k = D.shape[0]
    best_order, best_len = model_tour_ss(store, cfg, D, K=K)
    rng = np.random.default_rng(seed)
    for s in range(samples):
        order = model_tour(store, cfg, D, start=s % k, mode="sample", rng=rng, K=K)
        length = tour_length(D, order)
        if length < best_len - 1e-15:
            best_order, best_len = order, length
    return best_order, float(best_len)
