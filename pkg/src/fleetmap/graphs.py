"""Road-graph model: street segments as nodes, travel-time weights, dense
all-pairs distances, feature construction and synthetic graph generation.

Each node stands for one street segment.  A directed edge u -> v means a
vehicle can continue from segment u onto segment v; traversing that edge
costs the travel time of the destination segment v (length / speed, scaled
by congestion once congestion has been observed).  All weights are seconds.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np

SPEED_CHOICES_MPS = (8.3, 13.9, 16.7)
LANE_CHOICES = (1, 2, 3)
CONGESTION_GAMMA = 3.0
CONGESTION_CAP = 4.0

# Widths of the planner input blocks: 10 scalar node features plus the
# communication channels (16 by default).
NODE_FEATURE_DIM = 10
DEFAULT_COMM_CHANNELS = 16


class GraphError(ValueError):
    """Raised for malformed graphs or invalid graph queries."""


@dataclass(frozen=True)
class NodeAttr:
    """Physical attributes of one street segment."""

    length_m: float
    speed_mps: float
    lanes_in: int
    lanes_out: int

    def base_time(self) -> float:
        """Free-flow traversal time in seconds."""
        return self.length_m / self.speed_mps

    def validate(self, idx: int) -> None:
        if not (self.length_m > 0 and math.isfinite(self.length_m)):
            raise GraphError(f"node {idx}: length_m must be finite and > 0, got {self.length_m}")
        if not (self.speed_mps > 0 and math.isfinite(self.speed_mps)):
            raise GraphError(f"node {idx}: speed_mps must be finite and > 0, got {self.speed_mps}")
        if int(self.lanes_in) < 1 or int(self.lanes_out) < 1:
            raise GraphError(f"node {idx}: lane counts must be positive integers")


@dataclass
class RoadGraph:
    """Strongly connected directed graph of street segments."""

    nodes: list[NodeAttr]
    edges: list[tuple[int, int]]
    out_edges: list[list[int]] = field(init=False, repr=False)
    in_edges: list[list[int]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = len(self.nodes)
        if n < 2:
            raise GraphError(f"graph needs at least 2 nodes, got {n}")
        for i, attr in enumerate(self.nodes):
            attr.validate(i)
        seen: set[tuple[int, int]] = set()
        out: list[list[int]] = [[] for _ in range(n)]
        inc: list[list[int]] = [[] for _ in range(n)]
        for k, (u, v) in enumerate(self.edges):
            if not (0 <= u < n and 0 <= v < n):
                raise GraphError(f"edge {k}: endpoint out of range: ({u}, {v})")
            if u == v:
                raise GraphError(f"edge {k}: self-loop at node {u}")
            if (u, v) in seen:
                raise GraphError(f"edge {k}: duplicate directed edge ({u}, {v})")
            seen.add((u, v))
            out[u].append(v)
            inc[v].append(u)
        self.out_edges = out
        self.in_edges = inc
        witness = strong_connectivity_witness(n, out, inc)
        if witness is not None:
            raise GraphError(
                f"graph not strongly connected: no path from {witness[0]} to {witness[1]}"
            )

    @property
    def n(self) -> int:
        return len(self.nodes)

    def base_times(self) -> np.ndarray:
        """Free-flow traversal time of every segment, seconds."""
        return np.array([a.base_time() for a in self.nodes], dtype=np.float64)

    def base_edge_weights(self) -> np.ndarray:
        """Free-flow weight of every edge, aligned with ``self.edges``."""
        times = self.base_times()
        return np.array([times[v] for _, v in self.edges], dtype=np.float64)

    def adjacency_matrix(self) -> np.ndarray:
        """Binary n x n connectivity matrix."""
        m = np.zeros((self.n, self.n), dtype=np.float64)
        for u, v in self.edges:
            m[u, v] = 1.0
        return m


def strong_connectivity_witness(
    n: int, out_edges: list[list[int]], in_edges: list[list[int]]
) -> tuple[int, int] | None:
    """Return an unreachable (src, dst) pair, or None if strongly connected.

    Forward and backward reachability from node 0 suffices: the graph is
    strongly connected iff 0 reaches every node and every node reaches 0.
    """
    for adj, forward in ((out_edges, True), (in_edges, False)):
        seen = [False] * n
        seen[0] = True
        stack = [0]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        for v in range(n):
            if not seen[v]:
                return (0, v) if forward else (v, 0)
    return None


def congestion_factor(rho: float, gamma: float = CONGESTION_GAMMA, cap: float = CONGESTION_CAP) -> float:
    """Travel-time multiplier 1/(1 - rho^gamma), capped so full jams stay finite."""
    rho = min(max(rho, 0.0), 1.0)
    blocked = 1.0 - rho**gamma
    if blocked <= 1.0 / cap:
        return cap
    return min(cap, 1.0 / blocked)


def edge_time_weight(node: NodeAttr, observed_congestion: float | None = None) -> float:
    """Seconds to traverse ``node``; congested cost if its congestion is known."""
    t = node.base_time()
    if observed_congestion is None:
        return t
    return t * congestion_factor(observed_congestion)


@dataclass
class DenseDistance:
    """All-pairs minimum travel times D plus the z-scored form A.

    ``next_hop[i, j]`` is the node after i on a minimum-time path to j,
    fixed by the Floyd-Warshall pass so every consumer walks identical
    paths.  ``degenerate`` flags sigma == 0 (all entries equal), in which
    case A is all zeros.
    """

    D: np.ndarray
    next_hop: np.ndarray
    A: np.ndarray | None = None
    mu: float = 0.0
    sigma: float = 0.0
    degenerate: bool = False

    def path(self, src: int, dst: int) -> list[int]:
        """Minimum-time node sequence from src to dst (both inclusive)."""
        if src == dst:
            return [src]
        path = [src]
        cur = src
        while cur != dst:
            cur = int(self.next_hop[cur, dst])
            path.append(cur)
        return path


def floyd_warshall(graph: RoadGraph, edge_weights: np.ndarray) -> DenseDistance:
    """All-pairs minimum travel times over the given per-edge weights.

    Raises GraphError naming a witness pair if any node pair is unreachable
    (cannot happen for a validated RoadGraph, but weights are caller-supplied).
    """
    edge_weights = np.asarray(edge_weights, dtype=np.float64)
    if edge_weights.shape != (len(graph.edges),):
        raise GraphError(
            f"edge_weights shape {edge_weights.shape} does not match edge count {len(graph.edges)}"
        )
    if np.any(edge_weights <= 0) or not np.all(np.isfinite(edge_weights)):
        raise GraphError("edge weights must be positive and finite")
    n = graph.n
    D = np.full((n, n), np.inf, dtype=np.float64)
    np.fill_diagonal(D, 0.0)
    next_hop = np.full((n, n), -1, dtype=np.int64)
    next_hop[np.arange(n), np.arange(n)] = np.arange(n)
    for (u, v), w in zip(graph.edges, edge_weights):
        if w < D[u, v]:
            D[u, v] = w
            next_hop[u, v] = v
    for k in range(n):
        via = D[:, k, None] + D[None, k, :]
        better = via < D
        if better.any():
            D = np.where(better, via, D)
            next_hop = np.where(better, next_hop[:, k, None], next_hop)
    if np.isinf(D).any():
        i, j = np.argwhere(np.isinf(D))[0]
        raise GraphError(f"graph not strongly connected: no path from {i} to {j}")
    return DenseDistance(D=D, next_hop=next_hop)


def normalize_distance(dd: DenseDistance) -> DenseDistance:
    """Fill in A = (D - mu) / sigma using element-wise moments of D."""
    mu = float(dd.D.mean())
    sigma = float(dd.D.std())
    if sigma == 0.0:
        dd.A = np.zeros_like(dd.D)
        dd.degenerate = True
    else:
        dd.A = (dd.D - mu) / sigma
        dd.degenerate = False
    dd.mu = mu
    dd.sigma = sigma
    return dd


def dense_distance(graph: RoadGraph, edge_weights: np.ndarray | None = None) -> DenseDistance:
    """Floyd-Warshall plus normalization in one call (free-flow weights by default)."""
    if edge_weights is None:
        edge_weights = graph.base_edge_weights()
    return normalize_distance(floyd_warshall(graph, edge_weights))


def shortest_path(graph: RoadGraph, edge_weights: np.ndarray, src: int, dst: int) -> list[int]:
    """One minimum-weight path src -> dst by Dijkstra; [src] when src == dst."""
    n = graph.n
    if not (0 <= src < n and 0 <= dst < n):
        raise GraphError(f"invalid endpoints ({src}, {dst}) for graph of {n} nodes")
    if src == dst:
        return [src]
    weight = {}
    for (u, v), w in zip(graph.edges, np.asarray(edge_weights, dtype=np.float64)):
        if w <= 0 or not math.isfinite(w):
            raise GraphError("edge weights must be positive and finite")
        weight[(u, v)] = min(w, weight.get((u, v), math.inf))
    dist = [math.inf] * n
    prev = [-1] * n
    dist[src] = 0.0
    frontier = [(0.0, src)]
    while frontier:
        d, u = heapq.heappop(frontier)
        if d > dist[u]:
            continue
        if u == dst:
            break
        for v in graph.out_edges[u]:
            nd = d + weight[(u, v)]
            if nd < dist[v]:
                dist[v] = nd
                prev[v] = u
                heapq.heappush(frontier, (nd, v))
    if math.isinf(dist[dst]):
        raise GraphError(f"graph not strongly connected: no path from {src} to {dst}")
    path = [dst]
    while path[-1] != src:
        path.append(prev[path[-1]])
    path.reverse()
    return path


@dataclass
class FeatureMatrix:
    """Planner input: n x 10 scalar node features and n x c communication features."""

    X: np.ndarray
    U: np.ndarray


def build_features(
    graph: RoadGraph,
    dd: DenseDistance,
    cur_node: int,
    agent_nodes: list[int],
    explored: np.ndarray,
    fully_covered: np.ndarray,
    observed_traffic: np.ndarray,
    U: np.ndarray,
) -> FeatureMatrix:
    """Assemble the per-node feature matrix for one agent's decision.

    Column layout (in order): sum of in-edge / out-edge weights (hours),
    number of in / out edges, any-agent-at-v, v-unexplored, v-fully-covered,
    min-max scaled distance from the current position, observed congestion
    cost factor (0 until a node has been explored), and direct adjacency
    from the current position.
    """
    n = graph.n
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] != n:
        raise GraphError(f"communication features must be ({n}, c), got {U.shape}")
    explored = np.asarray(explored, dtype=bool)
    fully_covered = np.asarray(fully_covered, dtype=bool)
    observed_traffic = np.asarray(observed_traffic, dtype=np.float64)
    times = graph.base_times()
    X = np.zeros((n, NODE_FEATURE_DIM), dtype=np.float64)
    for u, v in graph.edges:
        w_hours = times[v] / 3600.0
        X[v, 0] += w_hours  # in-edge weights at v
        X[u, 1] += w_hours  # out-edge weights at u
    X[:, 2] = [len(graph.in_edges[v]) for v in range(n)]
    X[:, 3] = [len(graph.out_edges[v]) for v in range(n)]
    for a in agent_nodes:
        X[a, 4] = 1.0
    X[:, 5] = (~explored).astype(np.float64)
    X[:, 6] = fully_covered.astype(np.float64)
    row = dd.D[cur_node]
    span = row.max() - row.min()
    X[:, 7] = (row - row.min()) / span if span > 0 else 0.0
    X[:, 8] = np.where(explored, observed_traffic, 0.0)
    X[graph.out_edges[cur_node], 9] = 1.0
    return FeatureMatrix(X=X, U=U)


def generate_graph(n_nodes: int, seed: int) -> RoadGraph:
    """Synthetic road-like graph: perturbed grid skeleton, pruned one-way
    streets and a few long-range shortcuts, kept strongly connected.

    Deterministic in ``seed``.
    """
    if n_nodes < 2:
        raise GraphError(f"n_nodes must be >= 2, got {n_nodes}")
    rng = np.random.default_rng(seed)
    side = math.ceil(math.sqrt(n_nodes))

    def cell(r: int, c: int) -> int | None:
        idx = r * side + c
        return idx if idx < n_nodes and 0 <= r < side and 0 <= c < side else None

    edges: set[tuple[int, int]] = set()
    for r in range(side):
        for c in range(side):
            u = cell(r, c)
            if u is None:
                continue
            for dr, dc in ((0, 1), (1, 0)):
                v = cell(r + dr, c + dc)
                if v is not None:
                    edges.add((u, v))
                    edges.add((v, u))

    out: list[list[int]] = [[] for _ in range(n_nodes)]
    inc: list[list[int]] = [[] for _ in range(n_nodes)]
    for u, v in edges:
        out[u].append(v)
        inc[v].append(u)

    # Prune ~35% of directed edges wherever strong connectivity survives,
    # turning many two-way street pairs into one-way streets.
    candidates = sorted(edges)
    rng.shuffle(candidates)
    target = int(0.35 * len(candidates))
    removed = 0
    for u, v in candidates:
        if removed >= target:
            break
        out[u].remove(v)
        inc[v].remove(u)
        if strong_connectivity_witness(n_nodes, out, inc) is None:
            edges.discard((u, v))
            removed += 1
        else:
            out[u].append(v)
            inc[v].append(u)

    # A few arterial shortcuts between distant cells.
    for _ in range(max(1, n_nodes // 12)):
        u, v = rng.integers(0, n_nodes, size=2)
        u, v = int(u), int(v)
        if u != v and (u, v) not in edges:
            edges.add((u, v))

    nodes = [
        NodeAttr(
            length_m=float(rng.uniform(50.0, 500.0)),
            speed_mps=float(rng.choice(SPEED_CHOICES_MPS)),
            lanes_in=int(rng.choice(LANE_CHOICES)),
            lanes_out=int(rng.choice(LANE_CHOICES)),
        )
        for _ in range(n_nodes)
    ]
    return RoadGraph(nodes=nodes, edges=sorted(edges))


def graph_to_dict(graph: RoadGraph) -> dict:
    return {
        "nodes": [
            {
                "id": i,
                "length_m": a.length_m,
                "speed_mps": a.speed_mps,
                "lanes_in": a.lanes_in,
                "lanes_out": a.lanes_out,
            }
            for i, a in enumerate(graph.nodes)
        ],
        "edges": [[u, v] for u, v in graph.edges],
    }


def graph_from_dict(obj: dict) -> RoadGraph:
    if not isinstance(obj, dict) or "nodes" not in obj or "edges" not in obj:
        raise GraphError("graph object must contain 'nodes' and 'edges'")
    raw_nodes = obj["nodes"]
    n = len(raw_nodes)
    attrs: list[NodeAttr | None] = [None] * n
    for k, rec in enumerate(raw_nodes):
        try:
            node_id = int(rec["id"])
            attr = NodeAttr(
                length_m=float(rec["length_m"]),
                speed_mps=float(rec["speed_mps"]),
                lanes_in=int(rec["lanes_in"]),
                lanes_out=int(rec["lanes_out"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphError(f"nodes[{k}]: {exc}") from exc
        if not (0 <= node_id < n):
            raise GraphError(f"nodes[{k}]: id {node_id} outside 0..{n - 1}")
        if attrs[node_id] is not None:
            raise GraphError(f"nodes[{k}]: duplicate id {node_id}")
        attrs[node_id] = attr
    edges = []
    for k, pair in enumerate(obj["edges"]):
        try:
            u, v = int(pair[0]), int(pair[1])
        except (TypeError, ValueError, IndexError) as exc:
            raise GraphError(f"edges[{k}]: {exc}") from exc
        edges.append((u, v))
    return RoadGraph(nodes=attrs, edges=edges)  # type: ignore[arg-type]


def load_graph(path: str) -> RoadGraph:
    """Load and validate a graph JSON file; errors name the offending entry."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    try:
        return graph_from_dict(obj)
    except GraphError as exc:
        raise GraphError(f"{path}: {exc}") from exc


def save_graph(graph: RoadGraph, path: str) -> None:
    from .ioutil import atomic_write_text

    atomic_write_text(path, json.dumps(graph_to_dict(graph), indent=1, sort_keys=True) + "\n")
