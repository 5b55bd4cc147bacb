import dataclasses

import numpy as np
import pytest

from fleetmap.autodiff import constant
from fleetmap.env import CoverageEnv, HiddenState, run_episode_async, run_episode_sync
from fleetmap.graphs import RoadGraph, generate_graph
from fleetmap.nn import lstm_cell
from fleetmap.policy import (
    NetworkPolicy,
    PolicyConfig,
    ablation_config,
    adjacency_input,
    attention_block,
    decide,
    decode_and_select,
    encode,
    init_policy_params,
    load_config,
    row_normalized_adjacency,
    save_config,
    value_iterate,
)


def lattice_env(n_nodes=12, seed=0, agents=2, traffic=False, start_nodes=None, passes=1):
    g = generate_graph(n_nodes, seed)
    hidden = HiddenState(M=np.full(g.n, passes, dtype=np.int64), rho=np.zeros(g.n))
    return CoverageEnv(g, hidden, agents, seed=seed, traffic=traffic, start_nodes=start_nodes)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = PolicyConfig(iterations=3, lstm=False, comm="maxpool")
    path = str(tmp_path / "cfg.json")
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        PolicyConfig(iterations=0)
    with pytest.raises(ValueError):
        PolicyConfig(comm="broadcast")


def test_ablation_config_flags():
    cfg = ablation_config(attention=False, dense_adjacency=False, lstm=False)
    assert (cfg.attention, cfg.dense_adjacency, cfg.lstm) == (False, False, False)
    assert ablation_config() == PolicyConfig()


# ---------------------------------------------------------------------------
# Parameter inventory
# ---------------------------------------------------------------------------


def count_params(cfg):
    store = init_policy_params(cfg, seed=0)
    return sum(t.value.size for t in store.tensors())


def test_full_model_parameter_count():
    assert count_params(PolicyConfig()) == 4802


def test_no_lstm_swaps_recurrence_for_linear_update():
    cfg = ablation_config(lstm=False)
    store = init_policy_params(cfg, seed=0)
    names = {t.name for t in store.tensors()}
    assert "upd_W" in names and "upd_b" in names
    assert not any(name.startswith("lstm_") for name in names)
    # four LSTM gates (2112 weights) collapse to one d x d linear (272)
    assert count_params(cfg) == 4802 - 2112 + 272


def test_pooled_comm_variants_need_no_projection_params():
    n_attn = count_params(PolicyConfig())
    n_mean = count_params(PolicyConfig(comm="commnet-mean"))
    assert n_attn - n_mean == 3 * (16 * 16 + 16)


# ---------------------------------------------------------------------------
# Selection rules
# ---------------------------------------------------------------------------


def test_greedy_breaks_ties_toward_lowest_node_id():
    values = constant(np.array([1.0, 3.0, 3.0, 0.0]))
    chosen, _ = decode_and_select(values, np.ones(4, dtype=bool))
    assert chosen == 1
    chosen, _ = decode_and_select(values, np.array([True, False, True, True]))
    assert chosen == 2


def test_masked_nodes_get_exactly_zero_probability():
    rng = np.random.default_rng(0)
    for _ in range(20):
        values = constant(rng.standard_normal(10))
        mask = rng.random(10) < 0.5
        if not mask.any():
            mask[int(rng.integers(10))] = True
        chosen, probs = decode_and_select(values, mask)
        assert np.all(probs.value[~mask] == 0.0)
        assert probs.value.sum() == pytest.approx(1.0)
        assert mask[chosen]


def test_sampling_matches_distribution_within_three_sigma():
    target = np.array([0.5, 0.3, 0.2])
    values = constant(np.log(target))
    rng = np.random.default_rng(7)
    draws = 3000
    counts = np.zeros(3)
    for _ in range(draws):
        chosen, _ = decode_and_select(values, np.ones(3, dtype=bool), mode="sample", rng=rng)
        counts[chosen] += 1
    freq = counts / draws
    sigma = np.sqrt(target * (1 - target) / draws)
    assert np.all(np.abs(freq - target) <= 3 * sigma)


def test_sample_mode_requires_rng():
    with pytest.raises(ValueError):
        decode_and_select(constant(np.zeros(3)), np.ones(3, dtype=bool), mode="sample")
    with pytest.raises(ValueError):
        decode_and_select(constant(np.zeros(3)), np.ones(3, dtype=bool), mode="ucb")


# ---------------------------------------------------------------------------
# Planner blocks
# ---------------------------------------------------------------------------


def test_one_round_is_attend_then_recur_with_residual():
    cfg = PolicyConfig(iterations=1)
    store = init_policy_params(cfg, seed=4)
    rng = np.random.default_rng(4)
    n, d = 6, cfg.hidden
    X0 = constant(rng.standard_normal((n, d)))
    A = rng.standard_normal((n, n))

    mixed = attention_block(store, X0, A, cfg)
    zeros = constant(np.zeros((n, d)))
    lstm_p = {
        g: (store[f"lstm_{g}_x"], store[f"lstm_{g}_h"], store[f"lstm_{g}_b"]) for g in "ifog"
    }
    h, _ = lstm_cell(mixed, zeros, zeros, lstm_p)
    expected = X0.value + h.value

    out = value_iterate(store, cfg, X0, A, K=1)
    np.testing.assert_array_equal(out.value, expected)


def test_attention_off_mixes_with_normalized_adjacency():
    cfg = ablation_config(attention=False)
    store = init_policy_params(cfg, seed=1)
    rng = np.random.default_rng(1)
    n, d = 5, cfg.hidden
    X = constant(rng.standard_normal((n, d)))
    adj = (rng.random((n, n)) < 0.4).astype(float)
    np.fill_diagonal(adj, 0.0)
    row_mix = row_normalized_adjacency(adj)

    out = attention_block(store, X, adj, cfg, row_mix=row_mix)
    V = X.value @ store["att_v_W"].value + store["att_v_b"].value
    np.testing.assert_allclose(out.value, row_mix @ V, atol=1e-12)

    with pytest.raises(ValueError):
        attention_block(store, X, adj, cfg, row_mix=None)


def test_row_normalized_adjacency_rows_sum_to_one():
    rng = np.random.default_rng(3)
    adj = (rng.random((7, 7)) < 0.3).astype(float)
    mix = row_normalized_adjacency(adj)
    np.testing.assert_allclose(mix.sum(axis=1), np.ones(7), atol=1e-12)
    assert np.all(mix >= 0)


def test_iteration_count_changes_the_values():
    env = lattice_env(seed=2)
    cfg = PolicyConfig()
    store = init_policy_params(cfg, seed=2)
    view = env.view()
    shallow = decide(store, cfg, view, 0, [], None, K=1)
    deep = decide(store, cfg, view, 0, [], None, K=5)
    assert not np.allclose(shallow.values, deep.values)


def test_adjacency_input_matches_flag():
    env = lattice_env(seed=5)
    view = env.view()
    dense = adjacency_input(view, PolicyConfig())
    np.testing.assert_array_equal(dense, view.dd.A)
    binary = adjacency_input(view, ablation_config(dense_adjacency=False))
    np.testing.assert_array_equal(binary, env.graph.adjacency_matrix() + np.eye(env.graph.n))


# ---------------------------------------------------------------------------
# Node relabeling equivariance
# ---------------------------------------------------------------------------


def permute_graph(g, perm):
    nodes = [None] * g.n
    for i, attr in enumerate(g.nodes):
        nodes[perm[i]] = attr
    edges = [(int(perm[u]), int(perm[v])) for u, v in g.edges]
    return RoadGraph(nodes=nodes, edges=edges)


def permute_rows(arr, perm):
    out = np.empty_like(arr)
    out[perm] = arr
    return out


@pytest.mark.parametrize("seed", range(3))
def test_decision_is_equivariant_under_node_relabeling(seed):
    g = generate_graph(12, seed)
    rng = np.random.default_rng(seed + 17)
    perm = rng.permutation(g.n)
    g2 = permute_graph(g, perm)

    M = rng.integers(1, 4, size=g.n)
    rho = rng.random(g.n) * 0.8
    hidden = HiddenState(M=M, rho=rho)
    hidden2 = HiddenState(M=permute_rows(M, perm), rho=permute_rows(rho, perm))

    starts = [0, g.n // 2]
    env = CoverageEnv(g, hidden, 2, traffic=True, start_nodes=starts)
    env2 = CoverageEnv(g2, hidden2, 2, traffic=True, start_nodes=[int(perm[s]) for s in starts])

    cfg = PolicyConfig(iterations=3)
    store = init_policy_params(cfg, seed=seed)
    msg = rng.standard_normal((g.n, cfg.channels))
    self_msg = rng.standard_normal((g.n, cfg.channels))

    out = decide(store, cfg, env.view(), 0, [(1, msg)], self_msg)
    out2 = decide(
        store,
        cfg,
        env2.view(),
        0,
        [(1, permute_rows(msg, perm))],
        permute_rows(self_msg, perm),
    )

    np.testing.assert_allclose(out2.values, permute_rows(out.values, perm), atol=1e-8)
    np.testing.assert_allclose(out2.probs.value, permute_rows(out.probs.value, perm), atol=1e-8)
    assert out2.chosen == int(perm[out.chosen])


# ---------------------------------------------------------------------------
# Episode adapter
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("runner", [run_episode_sync, run_episode_async])
def test_network_policy_completes_coverage(runner):
    # two passes per segment keeps the episode long enough that both
    # agents decide several times and exchange messages
    env = lattice_env(n_nodes=12, seed=3, agents=2, passes=2)
    cfg = PolicyConfig(iterations=2)
    policy = NetworkPolicy(init_policy_params(cfg, seed=3), cfg, mode="sample", seed=3)
    records, metrics = runner(env, policy)
    assert env.all_covered()
    assert metrics.total_cost_h > 0
    assert len(policy.inboxes[0]) == 1 and len(policy.inboxes[1]) == 1


def test_network_policy_consumes_forced_actions():
    env = lattice_env(n_nodes=9, seed=6, agents=1)
    cfg = PolicyConfig(iterations=1)
    policy = NetworkPolicy(init_policy_params(cfg, seed=6), cfg)
    chosen = []
    policy.decision_hook = lambda agent, out, action: chosen.append(action)

    view = env.view()
    free = [int(v) for v in np.flatnonzero(view.selectable())[:3]]
    policy.begin_episode(view, 1)
    policy.force_actions = __import__("collections").deque([free[0], None, free[1]])
    assert policy.act(view, 0) == free[0]
    assert policy.act(view, 0) is None
    assert policy.act(view, 0) == free[1]
    with pytest.raises(ValueError, match="forced actions"):
        policy.act(view, 0)
    assert chosen == [free[0], free[1]]


def test_eval_iterations_overrides_config_depth():
    env = lattice_env(n_nodes=9, seed=8, agents=1)
    cfg = PolicyConfig(iterations=5)
    store = init_policy_params(cfg, seed=8)
    deep = NetworkPolicy(store, cfg)
    shallow = NetworkPolicy(store, cfg, eval_iterations=1)
    view = env.view()
    deep.begin_episode(view, 1)
    shallow.begin_episode(view, 1)
    captured = {}
    deep.decision_hook = lambda a, out, act: captured.setdefault("deep", out.values)
    shallow.decision_hook = lambda a, out, act: captured.setdefault("shallow", out.values)
    deep.act(view, 0)
    shallow.act(view, 0)
    assert not np.allclose(captured["deep"], captured["shallow"])


def test_decision_state_does_not_leak_between_decisions():
    # the recurrent state is rebuilt from zero each decision, so the same
    # view must produce the same values no matter what was decided before
    env = lattice_env(n_nodes=9, seed=9, agents=1)
    cfg = PolicyConfig(iterations=3)
    store = init_policy_params(cfg, seed=9)
    view = env.view()
    first = decide(store, cfg, view, 0, [], None)
    for _ in range(3):
        decide(store, cfg, view, 0, [], None)
    again = decide(store, cfg, view, 0, [], None)
    np.testing.assert_array_equal(first.values, again.values)
