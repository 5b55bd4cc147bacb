"""Classical policies and solvers to compare the learned planner against.

Policies (random, greedy, replanning VRP) run under the same partial
information as the network: they see coverage flags, not visit counts.
The oracle gets the hidden state and plans once on an augmented instance
(every node duplicated per remaining required visit, leg costs charged
with the true congestion along the canonical minimum-time paths), so its
planned leg costs equal the simulator's realized costs exactly.  The
exhaustive oracle brute-forces tiny instances for ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import CoverageEnv, EnvView, Policy
from .graphs import RoadGraph, congestion_factor

MOVE_BUDGET_FACTOR = 10
EXHAUSTIVE_NODE_LIMIT = 7
EXHAUSTIVE_VISIT_LIMIT = 9


class RandomPolicy(Policy):
    """Uniformly picks any node not yet fully covered."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def act(self, view: EnvView, agent_id: int) -> int:
        candidates = np.flatnonzero(view.selectable())
        return int(self.rng.choice(candidates))


class GreedyPolicy(Policy):
    """Drives to the nearest node (free-flow travel time) still needing
    visits; coverage knowledge is shared across the fleet.  Ties break
    toward the lowest node id."""

    def act(self, view: EnvView, agent_id: int) -> int:
        candidates = np.flatnonzero(view.selectable())
        distances = view.dd.D[view.agent_nodes[agent_id], candidates]
        return int(candidates[np.argmin(distances)])


# ---------------------------------------------------------------------------
# Tour construction and improvement over an explicit cost matrix
# ---------------------------------------------------------------------------


@dataclass
class Plan:
    """Ordered destination lists per agent with the planned leg costs."""

    routes: list[list[int]]
    leg_costs: list[list[float]] = field(default_factory=list)

    @property
    def total_cost(self) -> float:
        return float(sum(sum(legs) for legs in self.leg_costs))

    def agent_cost(self, i: int) -> float:
        return float(sum(self.leg_costs[i]))


def route_cost(C: np.ndarray, start: int, route: list[int]) -> float:
    """Cost of an open tour from ``start`` through ``route`` in order."""
    cost = 0.0
    cur = start
    for v in route:
        cost += C[cur, v]
        cur = v
    return float(cost)


def _leg_costs(C: np.ndarray, start: int, route: list[int]) -> list[float]:
    out = []
    cur = start
    for v in route:
        out.append(float(C[cur, v]))
        cur = v
    return out


def cheapest_insertion(
    C: np.ndarray, starts: list[int], visits: list[int]
) -> list[list[int]]:
    """Split the visit multiset over open directed tours from ``starts``.

    Repeatedly inserts the (visit, route, position) with the smallest
    total-cost increase; ties prefer the agent with the currently shorter
    tour, then lower indices, keeping the construction deterministic.
    """
    routes: list[list[int]] = [[] for _ in starts]
    remaining = sorted(visits)
    while remaining:
        costs = [route_cost(C, starts[a], r) for a, r in enumerate(routes)]
        best = None  # (delta, tour_time, agent, position, visit_idx)
        for vi, v in enumerate(remaining):
            if vi > 0 and remaining[vi - 1] == v:
                continue  # identical visit, identical deltas
            for a, route in enumerate(routes):
                cur_cost = costs[a]
                for pos in range(len(route) + 1):
                    before = starts[a] if pos == 0 else route[pos - 1]
                    if pos == len(route):
                        delta = C[before, v]
                    else:
                        after = route[pos]
                        delta = C[before, v] + C[v, after] - C[before, after]
                    key = (float(delta), cur_cost, a, pos, vi)
                    if best is None or key < best:
                        best = key
        _, _, a, pos, vi = best
        routes[a].insert(pos, remaining.pop(vi))
    return routes


def improve_routes(
    C: np.ndarray,
    starts: list[int],
    routes: list[list[int]],
    move_budget: int | None = None,
) -> list[list[int]]:
    """2-opt (segment reversal) plus Or-opt (segment relocation, lengths
    1..3, within and across agents), first-improvement, until no move
    helps or the move budget runs out.  Total cost never increases."""
    routes = [list(r) for r in routes]
    n_total = sum(len(r) for r in routes)
    if move_budget is None:
        move_budget = MOVE_BUDGET_FACTOR * max(n_total, 1) ** 2
    cost = [route_cost(C, starts[a], r) for a, r in enumerate(routes)]
    moves = 0

    def try_all():
        nonlocal moves
        # 2-opt: reverse route[i:j+1] within one agent.
        for a, route in enumerate(routes):
            for i in range(len(route) - 1):
                for j in range(i + 1, len(route)):
                    cand = route[:i] + route[i : j + 1][::-1] + route[j + 1 :]
                    new_cost = route_cost(C, starts[a], cand)
                    if new_cost < cost[a] - 1e-9:
                        routes[a] = cand
                        cost[a] = new_cost
                        moves += 1
                        return True
        # Or-opt: move route_a[i:i+seg] to another position (any agent).
        for a, route in enumerate(routes):
            for seg in (1, 2, 3):
                for i in range(len(route) - seg + 1):
                    piece = route[i : i + seg]
                    rest = route[:i] + route[i + seg :]
                    base_a = route_cost(C, starts[a], rest)
                    for b in range(len(routes)):
                        target = rest if b == a else routes[b]
                        for pos in range(len(target) + 1):
                            if b == a and pos == i:
                                continue
                            cand_b = target[:pos] + piece + target[pos:]
                            new_b = route_cost(C, starts[b], cand_b)
                            if b == a:
                                delta = new_b - cost[a]
                            else:
                                delta = (base_a + new_b) - (cost[a] + cost[b])
                            if delta < -1e-9:
                                if b == a:
                                    routes[a] = cand_b
                                    cost[a] = new_b
                                else:
                                    routes[a] = rest
                                    routes[b] = cand_b
                                    cost[a] = base_a
                                    cost[b] = new_b
                                moves += 1
                                return True
        return False

    while moves < move_budget and try_all():
        pass
    return routes


def solve_routes(C: np.ndarray, starts: list[int], visits: list[int]) -> Plan:
    """Cheapest insertion followed by local improvement."""
    routes = cheapest_insertion(C, starts, visits)
    routes = improve_routes(C, starts, routes)
    return Plan(
        routes=routes,
        leg_costs=[_leg_costs(C, starts[a], r) for a, r in enumerate(routes)],
    )


# ---------------------------------------------------------------------------
# Cost matrices
# ---------------------------------------------------------------------------


def congested_cost_matrix(env: CoverageEnv) -> np.ndarray:
    """Realized travel cost between all node pairs under the true
    congestion, accumulated along the same minimum-free-flow-time paths
    the simulator drives.  Planned leg costs therefore equal step costs."""
    graph = env.graph
    n = graph.n
    base = graph.base_times()
    factor = np.array([congestion_factor(float(r)) for r in env.hidden.rho]) if env.traffic else np.ones(n)
    node_cost = base * factor
    C = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            cost = 0.0
            cur = i
            while cur != j:
                cur = int(env.dd.next_hop[cur, j])
                cost += node_cost[cur]
            C[i, j] = cost
    return C


def loop_cost(env: CoverageEnv, C: np.ndarray, v: int) -> float:
    """Realized cost of revisiting v: the simulator picks the cycle by
    free-flow cost (one hop out, minimum-time path back) and charges the
    true congestion along it; reproduce that choice exactly."""
    base = env.graph.base_times()
    best, best_free = None, np.inf
    for w in env.graph.out_edges[v]:
        free = base[w] + env.dd.D[w, v]
        if best is None or free < best_free - 1e-12:
            best, best_free = w, free
    factor = congestion_factor(float(env.hidden.rho[best])) if env.traffic else 1.0
    return float(base[best] * factor + C[best, v])


def remaining_demand(env: CoverageEnv) -> list[int]:
    """Visit multiset still owed after the visits already registered."""
    owed = np.maximum(env.hidden.M - env.visits, 0)
    out: list[int] = []
    for v in range(env.graph.n):
        out.extend([v] * int(owed[v]))
    return out


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------


def iterative_vrp_plan(view: EnvView, C: np.ndarray) -> Plan:
    """Plan one visit to every not-yet-covered node from current positions."""
    targets = [int(v) for v in np.flatnonzero(view.selectable())]
    return solve_routes(C, list(view.agent_nodes), targets)


class IterativeVRPPolicy(Policy):
    """Plans tours over the currently known uncovered nodes and replans
    whenever the acting agent runs out of queued destinations while
    coverage is incomplete (revisit demands surface as failed visits)."""

    def __init__(self):
        self._queues: list[list[int]] = []
        self._C: np.ndarray | None = None

    def begin_episode(self, view: EnvView, n_agents: int) -> None:
        self._C = view.dd.D  # free-flow planning costs; congestion is hidden
        plan = iterative_vrp_plan(view, self._C)
        self._queues = [list(r) for r in plan.routes]

    def act(self, view: EnvView, agent_id: int) -> int | None:
        queue = self._queues[agent_id]
        while queue and view.fully_covered[queue[0]]:
            queue.pop(0)
        if not queue:
            plan = iterative_vrp_plan(view, self._C)
            self._queues = [list(r) for r in plan.routes]
            queue = self._queues[agent_id]
            while queue and view.fully_covered[queue[0]]:
                queue.pop(0)
        if not queue:
            # The replan handed everything to other agents.  Parking here
            # can deadlock the event loop (a parked agent never wakes), so
            # head for the nearest open node instead.
            open_nodes = np.flatnonzero(view.selectable())
            costs = self._C[view.agent_nodes[agent_id], open_nodes]
            return int(open_nodes[np.argmin(costs)])
        return int(queue.pop(0))


class PlanPolicy(Policy):
    """Executes a fixed plan, skipping destinations that became covered
    through drive-through visits and parking once its queue empties."""

    def __init__(self, plan: Plan):
        self._queues = [list(r) for r in plan.routes]

    def act(self, view: EnvView, agent_id: int) -> int | None:
        queue = self._queues[agent_id]
        while queue and view.fully_covered[queue[0]]:
            queue.pop(0)
        if not queue:
            return None
        return int(queue.pop(0))


def oracle_solver(env: CoverageEnv) -> Plan:
    """Full-information plan: the remaining visit multiset (node v owed
    M_v minus visits already granted at spawn) solved once over the
    congestion-adjusted cost matrix.

    Repeat visits to the same node cost a full cheapest cycle, matching
    how the simulator expands a destination equal to the current node.
    """
    C = congested_cost_matrix(env)
    visits = remaining_demand(env)
    n = env.graph.n
    # Consecutive duplicate destinations in a route cost a loop, not zero.
    # Encode by charging the loop cost on the diagonal during planning.
    C_plan = C.copy()
    for v in range(n):
        C_plan[v, v] = loop_cost(env, C, v)
    return solve_routes(C_plan, list(env.agent_nodes), visits)


def execute_plan(env: CoverageEnv, plan: Plan, sync: bool = True):
    """Run a plan to completion in the environment it was built for."""
    from .env import run_episode_async, run_episode_sync

    runner = run_episode_sync if sync else run_episode_async
    return runner(env, PlanPolicy(plan))


def _unique_permutations(items: list[int]):
    """Lexicographic multiset permutations without repeats."""
    items = sorted(items)
    n = len(items)
    counts: dict[int, int] = {}
    for x in items:
        counts[x] = counts.get(x, 0) + 1
    keys = sorted(counts)
    seq: list[int] = []

    def rec():
        if len(seq) == n:
            yield tuple(seq)
            return
        for k in keys:
            if counts[k] > 0:
                counts[k] -= 1
                seq.append(k)
                yield from rec()
                seq.pop()
                counts[k] += 1

    yield from rec()


def simulate_sequence(env: CoverageEnv, C: np.ndarray, order) -> float:
    """Realized cost of issuing ``order`` as destinations, mirroring the
    simulator: drive-through visits count, covered destinations are
    skipped, and execution stops once everything is covered."""
    visits = env.visits.copy()
    M = env.hidden.M
    covered = visits >= M
    base = env.graph.base_times()
    factor = (
        np.array([congestion_factor(float(r)) for r in env.hidden.rho])
        if env.traffic
        else np.ones(env.graph.n)
    )
    cur = env.agent_nodes[0]
    cost = 0.0
    for dest in order:
        if covered.all():
            break
        if covered[dest]:
            continue
        if dest == cur:
            path = None
            best = None
            for w in env.graph.out_edges[cur]:
                cand = [w] + env.dd.path(w, cur)[1:]
                c = base[w] + env.dd.D[w, cur]
                if best is None or c < best - 1e-12:
                    best, path = c, cand
        else:
            path = env.dd.path(cur, dest)[1:]
        for v in path:
            cost += base[v] * factor[v]
            visits[v] += 1
            if visits[v] >= M[v]:
                covered[v] = True
        cur = dest
    if not covered.all():
        raise ValueError("sequence does not cover the graph")
    return float(cost)


def exhaustive_oracle(env: CoverageEnv) -> tuple[list[int], float]:
    """Ground-truth optimum for tiny single-agent instances: enumerate
    every order of the remaining visit multiset and simulate each with
    full environment semantics, returning the cheapest."""
    if env.n_agents != 1:
        raise ValueError("exhaustive oracle handles a single agent only")
    if env.graph.n > EXHAUSTIVE_NODE_LIMIT:
        raise ValueError(f"graph too large for enumeration: {env.graph.n} nodes")
    demand = remaining_demand(env)
    if len(demand) > EXHAUSTIVE_VISIT_LIMIT:
        raise ValueError(f"too many required visits for enumeration: {len(demand)}")
    if not demand:
        return [], 0.0
    C = congested_cost_matrix(env)
    best_order, best_cost = None, np.inf
    for order in _unique_permutations(demand):
        cost = simulate_sequence(env, C, order)
        if cost < best_cost - 1e-12:
            best_order, best_cost = list(order), cost
    return best_order, float(best_cost)
