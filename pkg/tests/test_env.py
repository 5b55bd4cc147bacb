import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import fleetmap.env as env_mod
from fleetmap.baselines import GreedyPolicy, RandomPolicy
from fleetmap.env import (
    CoverageEnv,
    EpisodeConfig,
    HiddenState,
    MaskedActionError,
    MultiPassDistribution,
    NonTerminatingPolicyError,
    Policy,
    UNIFORM_1_3,
    gini,
    make_env,
    run_episode_async,
    run_episode_sync,
    sample_hidden,
    traffic_equilibrium,
)
from fleetmap.graphs import NodeAttr, RoadGraph, congestion_factor, dense_distance, generate_graph


def _attr(length=100.0, speed=10.0, lanes_in=1, lanes_out=1):
    return NodeAttr(length_m=length, speed_mps=speed, lanes_in=lanes_in, lanes_out=lanes_out)


def tiny_env(M, n_agents=1, traffic=False, start_nodes=None, seed=0):
    """Bidirectional chain over len(M) nodes with fixed visit requirements."""
    n = len(M)
    edges = []
    for i in range(n - 1):
        edges.append((i, i + 1))
        edges.append((i + 1, i))
    g = RoadGraph(nodes=[_attr() for _ in range(n)], edges=edges)
    hidden = HiddenState(M=np.array(M), rho=np.zeros(n))
    return CoverageEnv(g, hidden, n_agents, seed=seed, traffic=traffic, start_nodes=start_nodes)


# ---------------------------------------------------------------------------
# Hidden-state sampling
# ---------------------------------------------------------------------------


def test_uniform_sampling_range_and_frequencies():
    rng = np.random.default_rng(0)
    draws = MultiPassDistribution("uniform", 1, 3).sample(10000, rng)
    assert set(np.unique(draws)) <= {1, 2, 3}
    p = 1.0 / 3.0
    sigma = np.sqrt(p * (1 - p) / 10000)
    for value in (1, 2, 3):
        assert abs((draws == value).mean() - p) < 3 * sigma


def test_constant_distribution():
    rng = np.random.default_rng(1)
    draws = MultiPassDistribution("constant", 3, 3).sample(500, rng)
    assert np.all(draws == 3)


def test_two_point_distribution():
    rng = np.random.default_rng(2)
    draws = MultiPassDistribution("two_point", 2, 4).sample(2000, rng)
    assert set(np.unique(draws)) == {2, 4}


def test_trunc_gaussian_within_bounds():
    rng = np.random.default_rng(3)
    draws = MultiPassDistribution("trunc_gaussian", 1, 3, mean=2.0, std=1.0).sample(5000, rng)
    assert draws.min() >= 1 and draws.max() <= 3


def test_exp_shifted_at_least_one():
    rng = np.random.default_rng(4)
    draws = MultiPassDistribution("exp_shifted", mean=2.0).sample(5000, rng)
    assert draws.min() >= 1
    assert 1.5 < draws.mean() < 2.5


def test_invalid_distribution_parameters():
    with pytest.raises(ValueError):
        MultiPassDistribution("uniform", 3, 1)
    with pytest.raises(ValueError):
        MultiPassDistribution("nope", 1, 2)


def test_sample_hidden_deterministic():
    g = generate_graph(12, seed=5)
    a = sample_hidden(UNIFORM_1_3, g, seed=9)
    b = sample_hidden(UNIFORM_1_3, g, seed=9)
    np.testing.assert_array_equal(a.M, b.M)
    np.testing.assert_array_equal(a.rho, b.rho)


def test_hidden_state_rejects_bad_values():
    with pytest.raises(ValueError):
        HiddenState(M=np.array([0, 1]), rho=np.zeros(2))
    with pytest.raises(ValueError):
        HiddenState(M=np.array([1, 1]), rho=np.array([0.5, 1.5]))


# ---------------------------------------------------------------------------
# Traffic equilibrium
# ---------------------------------------------------------------------------


def test_traffic_symmetric_cycle_uniform_fixed_point():
    # Odd length matters: even cycles admit a whole family of alternating
    # fixed points (neighbour pairs summing to 1), odd ones only the
    # uniform point.
    n = 5
    edges = [(i, (i + 1) % n) for i in range(n)]
    g = RoadGraph(nodes=[_attr() for _ in range(n)], edges=edges)
    # The stop rule bounds the step, not the distance to the fixed point,
    # so drive further than the default tolerance before asserting spread.
    rho, converged = traffic_equilibrium(g, seed=0, tol=1e-7, max_iter=2000)
    assert converged
    assert rho.max() - rho.min() < 1e-4
    assert rho.mean() == pytest.approx(0.5, abs=1e-4)


def test_traffic_residual_below_tolerance():
    for seed in range(100):
        g = generate_graph(25, seed=seed)
        rho, converged = traffic_equilibrium(g, seed=seed)
        assert converged
        # one more update moves nothing beyond the stopping tolerance
        caps = np.array([a.lanes_out * a.speed_mps for a in g.nodes])
        outdeg = np.array([max(1, len(g.out_edges[v])) for v in range(g.n)])
        flow = caps * (1.0 - rho)
        demand = np.zeros(g.n)
        for u, v in g.edges:
            demand[v] += flow[u] / outdeg[u]
        new_rho = rho + 0.5 * (np.clip(demand / caps, 0.0, 1.0) - rho)
        assert np.abs(new_rho - rho).max() < 1e-4


def test_traffic_rho_in_unit_interval():
    for seed in range(20):
        g = generate_graph(15, seed=seed)
        rho, _ = traffic_equilibrium(g, seed=seed + 100)
        assert rho.min() >= 0.0 and rho.max() <= 1.0


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------


def test_step_single_visit_success():
    env = tiny_env([1, 1], start_nodes=[0])
    result = env.step(0, 1)
    assert result.success
    assert env.fully_covered[1]


def test_step_needs_revisit():
    env = tiny_env([1, 3], start_nodes=[0])
    result = env.step(0, 1)
    assert not result.success
    assert env.visits[1] == 1 and not env.fully_covered[1]


def test_step_masked_action_rejected():
    env = tiny_env([1, 1], start_nodes=[0])
    env.step(0, 1)
    with pytest.raises(MaskedActionError, match="masked action"):
        env.step(0, 1)


def test_step_cost_matches_congested_edge_weights():
    g = generate_graph(10, seed=1)
    hidden = sample_hidden(UNIFORM_1_3, g, seed=2)
    env = CoverageEnv(g, hidden, 1, seed=3)
    cur = env.agent_nodes[0]
    dest = int(np.argmax(env.dd.D[cur]))
    path = env.dd.path(cur, dest)
    expected = sum(
        g.nodes[v].base_time() * congestion_factor(float(hidden.rho[v])) for v in path[1:]
    )
    result = env.step(0, dest)
    assert result.cost_s == pytest.approx(expected, abs=1e-12)
    assert result.visited == path[1:]


def test_step_pass_through_counts_and_reveals():
    env = tiny_env([1, 1, 1], start_nodes=[0])
    env.step(0, 2)  # drives 0 -> 1 -> 2
    assert env.visits[1] == 1 and env.explored[1]
    assert env.all_covered()


def test_spawn_counts_as_first_visit():
    env = tiny_env([1, 2], start_nodes=[1])
    assert env.visits[1] == 1
    assert env.explored[1] and not env.fully_covered[1]
    assert env.visits[0] == 0


def test_revisit_current_node_drives_a_loop():
    env = tiny_env([1, 2], start_nodes=[1])
    result = env.step(0, 1)  # still needs one more visit; must leave and return
    assert result.cost_s > 0
    assert env.visits[1] == 2 and env.fully_covered[1]
    assert env.visits[0] == 1  # the loop passes through the neighbour


def test_step_rejects_bad_ids():
    env = tiny_env([1, 1])
    with pytest.raises(ValueError):
        env.step(2, 0)
    with pytest.raises(ValueError):
        env.step(0, 99)


def test_view_hides_hidden_state():
    env = make_env(10, 2, seed=0)
    view = env.view()
    payload = view.to_dict()
    assert set(payload) == {"agent_nodes", "explored", "fully_covered", "observed_traffic"}
    for v in range(env.graph.n):
        if not view.explored[v]:
            assert view.observed_traffic[v] == 0.0
    assert not hasattr(view, "M") and not hasattr(view, "rho")


# ---------------------------------------------------------------------------
# Episode loops
# ---------------------------------------------------------------------------


class FirstOpenPolicy(Policy):
    def act(self, view, agent_id):
        return int(np.flatnonzero(view.selectable())[0])


def test_minimal_episode_two_actions():
    env = tiny_env([1, 1], start_nodes=[0])
    records, metrics = run_episode_sync(env, FirstOpenPolicy())
    assert len(records) <= 2
    assert env.all_covered()


def test_episode_covers_all_requirements():
    env = make_env(12, 2, seed=4)
    run_episode_sync(env, RandomPolicy(seed=1))
    assert np.all(env.visits >= env.hidden.M)


def test_sync_deterministic_trajectories():
    a = run_episode_sync(make_env(10, 2, seed=6), RandomPolicy(seed=2))
    b = run_episode_sync(make_env(10, 2, seed=6), RandomPolicy(seed=2))
    assert [(r.agent_id, r.action) for r in a[0]] == [(r.agent_id, r.action) for r in b[0]]
    assert a[1].total_cost_h == b[1].total_cost_h


def test_cost_accounting_exact():
    env = make_env(15, 3, seed=7)
    records, metrics = run_episode_sync(env, RandomPolicy(seed=3))
    assert metrics.total_cost_h == pytest.approx(
        sum(r.cost_s for r in records) / 3600.0, abs=1e-12
    )
    assert metrics.total_cost_h == pytest.approx(sum(metrics.per_agent_h), abs=1e-12)


def test_async_sync_single_agent_equivalence():
    for seed in range(10):
        e1 = make_env(12, 1, seed=seed)
        e2 = make_env(12, 1, seed=seed)
        _, m1 = run_episode_sync(e1, GreedyPolicy())
        _, m2 = run_episode_async(e2, GreedyPolicy())
        assert abs(m1.total_cost_h - m2.total_cost_h) <= 1e-9
        assert abs(m1.makespan_h - m2.makespan_h) <= 1e-9


def test_async_balanced_halves_makespan():
    # Two agents on a 4-node two-way square with identical segments and no
    # traffic: each covers its own side, so the makespan is half the total.
    edges = [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2), (3, 0), (0, 3)]
    g = RoadGraph(nodes=[_attr() for _ in range(4)], edges=edges)
    hidden = HiddenState(M=np.ones(4, dtype=int), rho=np.zeros(4))
    env = CoverageEnv(g, hidden, 2, traffic=False, start_nodes=[0, 2])
    _, metrics = run_episode_async(env, GreedyPolicy())
    assert metrics.makespan_h == pytest.approx(metrics.total_cost_h / 2.0, rel=1e-9)
    assert metrics.gini == pytest.approx(0.0, abs=1e-12)


def test_async_tie_breaks_by_agent_id():
    order = []

    class TrackingGreedy(GreedyPolicy):
        def act(self, view, agent_id):
            order.append(agent_id)
            return super().act(view, agent_id)

    env = tiny_env([1, 1, 1, 1], n_agents=2, start_nodes=[0, 0])
    run_episode_async(env, TrackingGreedy())
    assert order[0] == 0 and order[1] == 1  # both start at t=0; lower id first


def test_step_budget_error(monkeypatch):
    monkeypatch.setattr(env_mod, "STEP_BUDGET_FACTOR", 0)
    env = tiny_env([1, 1], start_nodes=[0])
    with pytest.raises(NonTerminatingPolicyError, match="non-terminating"):
        run_episode_sync(env, FirstOpenPolicy())


class IdlePolicy(Policy):
    def act(self, view, agent_id):
        return None


def test_all_idle_detected_sync():
    env = tiny_env([1, 1, 1], n_agents=2, start_nodes=[0, 0])
    with pytest.raises(NonTerminatingPolicyError, match="idle"):
        run_episode_sync(env, IdlePolicy())


def test_all_idle_detected_async():
    env = tiny_env([1, 1, 1], n_agents=2, start_nodes=[0, 0])
    with pytest.raises(NonTerminatingPolicyError, match="idle"):
        run_episode_async(env, IdlePolicy())


def test_termination_many_seeds_small():
    for seed in range(25):
        for agents in (1, 2):
            env = make_env(10, agents, seed=seed)
            run_episode_sync(env, RandomPolicy(seed=seed))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def test_gini_examples():
    assert gini([5.0, 5.0]) == 0.0
    assert gini([0.0, 8.0]) == pytest.approx(0.5)
    assert gini([1.0, 1.0, 1.0, 9.0]) == pytest.approx(0.5)
    assert gini([0.0, 0.0]) == 0.0


@given(st.lists(st.floats(min_value=0.0, max_value=1e6), min_size=1, max_size=8))
@settings(max_examples=200, deadline=None)
def test_gini_bounded(loads):
    value = gini(loads)
    assert 0.0 <= value <= 1.0


def test_gini_rejects_negative():
    with pytest.raises(ValueError):
        gini([-1.0, 2.0])


# ---------------------------------------------------------------------------
# Episode configuration
# ---------------------------------------------------------------------------


def test_episode_config_roundtrip_and_build():
    cfg = EpisodeConfig.from_dict(
        {
            "generator_nodes": 8,
            "agents": 2,
            "multipass": {"kind": "two_point", "low": 2, "high": 4},
            "traffic": False,
            "seed": 5,
        }
    )
    env = cfg.build()
    assert env.graph.n == 8 and env.n_agents == 2
    assert not env.traffic
    assert set(np.unique(env.hidden.M)) <= {2, 4}


def test_episode_config_graph_file(tmp_path):
    from fleetmap.graphs import save_graph

    g = generate_graph(6, seed=1)
    path = tmp_path / "g.json"
    save_graph(g, str(path))
    cfg = EpisodeConfig.from_dict({"graph": str(path), "agents": 1})
    env = cfg.build()
    assert env.graph.n == 6
