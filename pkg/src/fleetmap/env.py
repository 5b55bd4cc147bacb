"""Coverage episode environment.

Hidden per-node state: how many visits each segment needs before it counts
as fully mapped, and its equilibrium congestion.  Policies only ever see
success/failure outcomes, explored/covered flags and the congestion of
segments somebody has already driven.  Training uses the synchronous
round-robin loop; evaluation uses the asynchronous event-driven loop where
each action occupies the acting agent for its realized travel time.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .graphs import (
    DenseDistance,
    GraphError,
    RoadGraph,
    build_features,
    congestion_factor,
    dense_distance,
    generate_graph,
    load_graph,
)

TRAFFIC_DAMPING = 0.5
TRAFFIC_TOL = 1e-4
TRAFFIC_MAX_ITER = 200
STEP_BUDGET_FACTOR = 50


class MaskedActionError(ValueError):
    """An agent asked to travel to a node already reported fully covered."""


class NonTerminatingPolicyError(RuntimeError):
    """Episode exceeded the step budget without covering the graph."""


# ---------------------------------------------------------------------------
# Hidden state sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultiPassDistribution:
    """Distribution of the hidden per-node visit requirement.

    kinds: ``uniform`` (integer, inclusive bounds), ``trunc_gaussian``
    (rounded normal clamped to [low, high]), ``two_point`` (coin flip
    between two values), ``constant``, ``exp_shifted`` (1 + rounded
    exponential with the given mean).
    """

    kind: str
    low: int = 1
    high: int = 3
    mean: float = 2.0
    std: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "trunc_gaussian", "two_point", "constant", "exp_shifted"):
            raise ValueError(f"unknown multipass kind {self.kind!r}")
        if self.kind in ("uniform", "trunc_gaussian", "two_point") and self.low > self.high:
            raise ValueError(f"invalid bounds: low={self.low} > high={self.high}")
        if min(self.low, self.high) < 1 and self.kind != "exp_shifted":
            raise ValueError("visit requirements must be >= 1")
        if self.kind == "exp_shifted" and self.mean < 1.0:
            raise ValueError("exp_shifted mean must be >= 1")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            m = rng.integers(self.low, self.high + 1, size=n)
        elif self.kind == "constant":
            m = np.full(n, self.low, dtype=np.int64)
        elif self.kind == "two_point":
            m = np.where(rng.random(n) < 0.5, self.low, self.high)
        elif self.kind == "trunc_gaussian":
            m = np.rint(rng.normal(self.mean, self.std, size=n))
            m = np.clip(m, self.low, self.high)
        else:  # exp_shifted: 1 + rounded Exponential(mean - 1), clamped >= 1
            m = 1 + np.rint(rng.exponential(self.mean - 1.0, size=n))
        return np.maximum(m.astype(np.int64), 1)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("uniform", "trunc_gaussian", "two_point"):
            d.update(low=self.low, high=self.high)
        if self.kind == "constant":
            d["low"] = self.low
        if self.kind == "trunc_gaussian":
            d.update(mean=self.mean, std=self.std)
        if self.kind == "exp_shifted":
            d["mean"] = self.mean
        return d

    @staticmethod
    def from_dict(obj: dict) -> "MultiPassDistribution":
        return MultiPassDistribution(
            kind=obj["kind"],
            low=int(obj.get("low", 1)),
            high=int(obj.get("high", obj.get("low", 3))),
            mean=float(obj.get("mean", 2.0)),
            std=float(obj.get("std", 1.0)),
        )


UNIFORM_1_3 = MultiPassDistribution("uniform", 1, 3)

# Distribution-shift evaluation suite; trained models only ever see
# UNIFORM_1_3, the rest probe generalization.
DISTRIBUTION_SHIFT_SUITE: list[tuple[str, MultiPassDistribution]] = [
    ("uniform_1_3", MultiPassDistribution("uniform", 1, 3)),
    ("uniform_1_5", MultiPassDistribution("uniform", 1, 5)),
    ("uniform_1_10", MultiPassDistribution("uniform", 1, 10)),
    ("trunc_gaussian_1_3", MultiPassDistribution("trunc_gaussian", 1, 3, mean=2.0, std=1.0)),
    ("two_point_2_4", MultiPassDistribution("two_point", 2, 4)),
    ("constant_3", MultiPassDistribution("constant", 3, 3)),
    ("exp_mean_2", MultiPassDistribution("exp_shifted", mean=2.0)),
]


def traffic_equilibrium(
    graph: RoadGraph,
    seed: int,
    damping: float = TRAFFIC_DAMPING,
    tol: float = TRAFFIC_TOL,
    max_iter: int = TRAFFIC_MAX_ITER,
) -> tuple[np.ndarray, bool]:
    """Damped fixed-point congestion over the lane/speed flow constraints.

    Node capacity is lanes_out * speed_limit; each node emits its free
    capacity split evenly over its outgoing edges, and congestion is the
    clamped ratio of inbound demand to capacity.  Returns (rho, converged).

    Convergence is declared at the first iterate whose own damped update
    moves no node by ``tol`` or more, and that iterate is returned, so
    re-deriving one update from the result always stays below ``tol``
    (stepping past the measurement would void the bound on graphs where
    the update map is locally expansive).
    """
    n = graph.n
    rng = np.random.default_rng(seed)
    rho = rng.uniform(0.0, 1.0, size=n)
    cap = np.array([a.lanes_out * a.speed_mps for a in graph.nodes], dtype=np.float64)
    outdeg = np.array([max(len(graph.out_edges[v]), 1) for v in range(n)], dtype=np.float64)
    src = np.array([u for u, _ in graph.edges], dtype=np.int64)
    dst = np.array([v for _, v in graph.edges], dtype=np.int64)
    for _ in range(max_iter):
        flow = cap * (1.0 - rho)
        demand = np.zeros(n)
        np.add.at(demand, dst, flow[src] / outdeg[src])
        new_rho = (1.0 - damping) * rho + damping * np.clip(demand / cap, 0.0, 1.0)
        if np.abs(new_rho - rho).max() < tol:
            return rho, True
        rho = new_rho
    return rho, False


@dataclass
class HiddenState:
    """Ground-truth per-node state, invisible to policies."""

    M: np.ndarray
    rho: np.ndarray
    traffic_converged: bool = True

    def __post_init__(self) -> None:
        self.M = np.asarray(self.M, dtype=np.int64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if (self.M < 1).any():
            raise ValueError("every visit requirement must be >= 1")
        if ((self.rho < 0) | (self.rho > 1)).any():
            raise ValueError("congestion must lie in [0, 1]")


def sample_hidden(
    dist: MultiPassDistribution, graph: RoadGraph, seed: int, traffic: bool = True
) -> HiddenState:
    rng = np.random.default_rng(seed)
    M = dist.sample(graph.n, rng)
    if traffic:
        rho, converged = traffic_equilibrium(graph, seed=int(rng.integers(2**31)))
    else:
        rho, converged = np.zeros(graph.n), True
    return HiddenState(M=M, rho=rho, traffic_converged=converged)


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    cost_s: float
    success: bool
    visited: list[int]


@dataclass
class EnvView:
    """What a policy is allowed to see.  Never contains the hidden visit
    requirements, nor congestion of unexplored nodes."""

    graph: RoadGraph
    dd: DenseDistance
    agent_nodes: list[int]
    explored: np.ndarray
    fully_covered: np.ndarray
    observed_traffic: np.ndarray  # congestion cost factor; 0 where unexplored

    def selectable(self) -> np.ndarray:
        return ~self.fully_covered

    def to_dict(self) -> dict:
        return {
            "agent_nodes": list(self.agent_nodes),
            "explored": self.explored.astype(int).tolist(),
            "fully_covered": self.fully_covered.astype(int).tolist(),
            "observed_traffic": self.observed_traffic.tolist(),
        }

    def features(self, agent_id: int, U: np.ndarray):
        return build_features(
            self.graph,
            self.dd,
            self.agent_nodes[agent_id],
            self.agent_nodes,
            self.explored,
            self.fully_covered,
            self.observed_traffic,
            U,
        )


class CoverageEnv:
    """One episode of the multi-agent coverage problem.

    The planner-side distance matrix uses free-flow weights; realized step
    costs are charged with the hidden congestion factors.  Moving to a
    destination expands to the minimum-time path, and every segment driven
    (pass-throughs included) counts toward coverage and has its congestion
    revealed.  Spawning on a segment counts as its first visit.
    """

    def __init__(
        self,
        graph: RoadGraph,
        hidden: HiddenState,
        n_agents: int,
        seed: int = 0,
        traffic: bool = True,
        dd: DenseDistance | None = None,
        start_nodes: list[int] | None = None,
    ):
        if n_agents < 1:
            raise ValueError("need at least one agent")
        self.graph = graph
        self.hidden = hidden
        self.n_agents = n_agents
        self.traffic = traffic
        self.dd = dd if dd is not None else dense_distance(graph)
        self._base_times = graph.base_times()
        self.seed = seed
        rng = np.random.default_rng(seed)
        if start_nodes is None:
            if n_agents <= graph.n:
                start_nodes = [int(v) for v in rng.choice(graph.n, size=n_agents, replace=False)]
            else:
                start_nodes = [int(v) for v in rng.integers(0, graph.n, size=n_agents)]
        self._start_nodes = list(start_nodes)
        self.reset()

    def reset(self) -> None:
        n = self.graph.n
        self.agent_nodes = list(self._start_nodes)
        self.visits = np.zeros(n, dtype=np.int64)
        self.explored = np.zeros(n, dtype=bool)
        self.fully_covered = np.zeros(n, dtype=bool)
        self.observed_traffic = np.zeros(n, dtype=np.float64)
        self.agent_cost_s = np.zeros(self.n_agents, dtype=np.float64)
        self.steps = 0
        for a in self.agent_nodes:
            self._register_visit(a)

    # -- internals ---------------------------------------------------------

    def _factor(self, v: int) -> float:
        return congestion_factor(float(self.hidden.rho[v])) if self.traffic else 1.0

    def _register_visit(self, v: int) -> None:
        self.visits[v] += 1
        self.explored[v] = True
        self.observed_traffic[v] = self._factor(v)
        if self.visits[v] >= self.hidden.M[v]:
            self.fully_covered[v] = True

    def _loop_path(self, cur: int) -> list[int]:
        # Revisiting the segment you are on means driving a cycle back to it.
        best, best_cost = None, np.inf
        for w in self.graph.out_edges[cur]:
            c = self._base_times[w] + self.dd.D[w, cur]
            if best is None or c < best_cost - 1e-12:
                best, best_cost = w, c
        return [cur] + self.dd.path(best, cur)

    # -- public API ---------------------------------------------------------

    @property
    def step_budget(self) -> int:
        return STEP_BUDGET_FACTOR * self.graph.n * int(self.hidden.M.max())

    def all_covered(self) -> bool:
        return bool(self.fully_covered.all())

    def view(self) -> EnvView:
        return EnvView(
            graph=self.graph,
            dd=self.dd,
            agent_nodes=list(self.agent_nodes),
            explored=self.explored.copy(),
            fully_covered=self.fully_covered.copy(),
            observed_traffic=self.observed_traffic.copy(),
        )

    def step(self, agent_id: int, destination: int) -> StepResult:
        if not (0 <= agent_id < self.n_agents):
            raise ValueError(f"no such agent {agent_id}")
        dest = int(destination)
        if not (0 <= dest < self.graph.n):
            raise ValueError(f"destination {dest} out of range")
        if self.fully_covered[dest]:
            raise MaskedActionError(f"masked action: node {dest} is already fully covered")
        cur = self.agent_nodes[agent_id]
        path = self._loop_path(cur) if dest == cur else self.dd.path(cur, dest)
        cost = 0.0
        for v in path[1:]:
            cost += self._base_times[v] * self._factor(v)
            self._register_visit(v)
        self.agent_nodes[agent_id] = dest
        self.steps += 1
        return StepResult(cost_s=cost, success=bool(self.fully_covered[dest]), visited=path[1:])


# ---------------------------------------------------------------------------
# Policies and episode loops
# ---------------------------------------------------------------------------


class Policy:
    """Episode-scoped decision maker; one instance drives all agents.

    ``act`` returns a destination node, or None to park the agent for
    the rest of the episode (plan-following policies park once their
    route is exhausted rather than duplicating another agent's work).
    ``deliver`` / ``outgoing_message`` are the message transport used by
    the episode loops; policies without communication ignore them.
    """

    def begin_episode(self, view: EnvView, n_agents: int) -> None:
        pass

    def act(self, view: EnvView, agent_id: int) -> int | None:
        raise NotImplementedError

    def outgoing_message(self, agent_id: int):
        return None

    def deliver(self, agent_id: int, sender_id: int, message) -> None:
        pass


@dataclass
class StepRecord:
    agent_id: int
    node_before: int
    action: int
    cost_s: float
    success: bool


@dataclass
class EpisodeMetrics:
    total_cost_h: float
    makespan_h: float
    per_agent_h: list[float]
    gini: float
    visit_counts: list[int]
    steps: int
    traffic_converged: bool

    def to_dict(self) -> dict:
        return {
            "total_cost_h": self.total_cost_h,
            "makespan_h": self.makespan_h,
            "per_agent_h": self.per_agent_h,
            "gini": self.gini,
            "visit_counts": self.visit_counts,
            "steps": self.steps,
            "traffic_converged": self.traffic_converged,
        }


def gini(loads) -> float:
    """Mean absolute difference over 2 * L^2 * mean; 0 for all-equal or all-zero."""
    x = np.asarray(loads, dtype=np.float64)
    if (x < 0).any():
        raise ValueError("loads must be non-negative")
    total = x.sum()
    if total == 0.0:
        return 0.0
    diffs = np.abs(x[:, None] - x[None, :]).sum()
    return float(diffs / (2.0 * len(x) ** 2 * x.mean()))


def _metrics(env: CoverageEnv, makespan_s: float, records: list[StepRecord]) -> EpisodeMetrics:
    per_agent = env.agent_cost_s / 3600.0
    return EpisodeMetrics(
        total_cost_h=float(per_agent.sum()),
        makespan_h=float(makespan_s / 3600.0),
        per_agent_h=[float(x) for x in per_agent],
        gini=gini(per_agent) if per_agent.sum() > 0 else 0.0,
        visit_counts=[int(c) for c in env.visits],
        steps=len(records),
        traffic_converged=env.hidden.traffic_converged,
    )


def run_episode_sync(env: CoverageEnv, policy: Policy) -> tuple[list[StepRecord], EpisodeMetrics]:
    """Round-robin loop: each agent in turn picks a destination until the
    whole graph is fully covered.  Messages reach everyone before the next
    agent moves."""
    policy.begin_episode(env.view(), env.n_agents)
    records: list[StepRecord] = []
    budget = env.step_budget
    agent = 0
    idle_streak = 0
    while not env.all_covered():
        if len(records) >= budget:
            raise NonTerminatingPolicyError(f"non-terminating policy: exceeded {budget} steps")
        view = env.view()
        before = view.agent_nodes[agent]
        action = policy.act(view, agent)
        if action is None:
            idle_streak += 1
            if idle_streak >= env.n_agents:
                raise NonTerminatingPolicyError("all agents idle with coverage incomplete")
            agent = (agent + 1) % env.n_agents
            continue
        idle_streak = 0
        result = env.step(agent, action)
        env.agent_cost_s[agent] += result.cost_s
        records.append(StepRecord(agent, before, action, result.cost_s, result.success))
        msg = policy.outgoing_message(agent)
        if msg is not None:
            for other in range(env.n_agents):
                if other != agent:
                    policy.deliver(other, agent, msg)
        agent = (agent + 1) % env.n_agents
    makespan_s = float(env.agent_cost_s.max())
    return records, _metrics(env, makespan_s, records)


def run_episode_async(env: CoverageEnv, policy: Policy) -> tuple[list[StepRecord], EpisodeMetrics]:
    """Event-driven loop: the earliest-finishing agent acts next (ties by
    agent id), receives messages sent up to that instant, and is busy for
    the realized cost of its chosen move."""
    policy.begin_episode(env.view(), env.n_agents)
    records: list[StepRecord] = []
    budget = env.step_budget
    # Events pop in time order, so messages land in the log in send order
    # and each agent just keeps a watermark into it.
    log: list[tuple[int, object]] = []
    watermark = [0] * env.n_agents
    frontier = [(0.0, i) for i in range(env.n_agents)]
    heapq.heapify(frontier)
    last_completion = [0.0] * env.n_agents
    while not env.all_covered():
        if len(records) >= budget:
            raise NonTerminatingPolicyError(f"non-terminating policy: exceeded {budget} steps")
        if not frontier:
            raise NonTerminatingPolicyError("all agents idle with coverage incomplete")
        now, agent = heapq.heappop(frontier)
        for sender, msg in log[watermark[agent]:]:
            if sender != agent:
                policy.deliver(agent, sender, msg)
        watermark[agent] = len(log)
        view = env.view()
        before = view.agent_nodes[agent]
        action = policy.act(view, agent)
        if action is None:
            continue  # parked: never rescheduled
        result = env.step(agent, action)
        env.agent_cost_s[agent] += result.cost_s
        records.append(StepRecord(agent, before, action, result.cost_s, result.success))
        msg = policy.outgoing_message(agent)
        if msg is not None:
            log.append((agent, msg))
        done = now + result.cost_s
        last_completion[agent] = done
        heapq.heappush(frontier, (done, agent))
    return records, _metrics(env, max(last_completion), records)


# ---------------------------------------------------------------------------
# Episode configuration files
# ---------------------------------------------------------------------------


@dataclass
class EpisodeConfig:
    """JSON-configurable episode spec: graph source, fleet size, visit
    distribution, traffic toggle and seed."""

    graph_path: str | None = None
    generator_nodes: int = 25
    n_agents: int = 2
    multipass: MultiPassDistribution = field(default_factory=lambda: UNIFORM_1_3)
    traffic: bool = True
    seed: int = 0

    @staticmethod
    def from_dict(obj: dict) -> "EpisodeConfig":
        mp = obj.get("multipass", {"kind": "uniform", "low": 1, "high": 3})
        return EpisodeConfig(
            graph_path=obj.get("graph"),
            generator_nodes=int(obj.get("generator_nodes", 25)),
            n_agents=int(obj.get("agents", 2)),
            multipass=MultiPassDistribution.from_dict(mp),
            traffic=bool(obj.get("traffic", True)),
            seed=int(obj.get("seed", 0)),
        )

    def build(self, episode_seed: int | None = None) -> CoverageEnv:
        seed = self.seed if episode_seed is None else episode_seed
        if self.graph_path:
            graph = load_graph(self.graph_path)
        else:
            graph = generate_graph(self.generator_nodes, seed=seed)
        hidden = sample_hidden(self.multipass, graph, seed=seed + 1, traffic=self.traffic)
        return CoverageEnv(graph, hidden, self.n_agents, seed=seed + 2, traffic=self.traffic)


def make_env(
    n_nodes: int,
    n_agents: int,
    seed: int,
    multipass: MultiPassDistribution = UNIFORM_1_3,
    traffic: bool = True,
    graph: RoadGraph | None = None,
    dd: DenseDistance | None = None,
) -> CoverageEnv:
    """Convenience constructor used throughout tests and benchmarks."""
    if graph is None:
        graph = generate_graph(n_nodes, seed=seed)
    hidden = sample_hidden(multipass, graph, seed=seed + 1, traffic=traffic)
    return CoverageEnv(graph, hidden, n_agents, seed=seed + 2, traffic=traffic, dd=dd)
