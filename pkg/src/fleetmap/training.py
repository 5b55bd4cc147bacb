"""Training and evaluation loops.

Imitation learning replays full-information expert routes through the
network with teacher forcing and minimizes per-decision cross-entropy.
Reinforcement learning samples rollouts, normalizes episode rewards
across the batch, and reweights the same cross-entropy gradients by the
normalized reward (two passes per batch: a cheap rollout pass recording
actions, then a replay pass that builds one decision graph at a time so
memory stays flat).

Evaluation always runs the asynchronous loop with greedy decoding.
"""

from __future__ import annotations

import json
import os
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward, cross_entropy
from .baselines import PlanPolicy, oracle_solver
from .env import (
    UNIFORM_1_3,
    CoverageEnv,
    EnvView,
    MaskedActionError,
    MultiPassDistribution,
    Policy,
    make_env,
    run_episode_async,
    run_episode_sync,
)
from .ioutil import atomic_write_text, dump_json_canonical, write_jsonl
from .nn import ParamStore, adam_step, decayed_lr
from .policy import NetworkPolicy, PolicyConfig, init_policy_params


class _RecordingPolicy(Policy):
    """Wraps a policy and logs every act() decision, idles included."""

    def __init__(self, inner: Policy):
        self.inner = inner
        self.actions: list[int | None] = []

    def begin_episode(self, view: EnvView, n_agents: int) -> None:
        self.inner.begin_episode(view, n_agents)

    def act(self, view: EnvView, agent_id: int) -> int | None:
        action = self.inner.act(view, agent_id)
        self.actions.append(None if action is None else int(action))
        return action

    def outgoing_message(self, agent_id: int):
        return self.inner.outgoing_message(agent_id)

    def deliver(self, agent_id: int, sender_id: int, message) -> None:
        self.inner.deliver(agent_id, sender_id, message)


@dataclass
class ExpertTrace:
    """Frozen expert behaviour for one episode: the action per rotation
    turn (None marks a parked agent) and the realized total cost."""

    actions: list[int | None]
    total_cost_h: float

    def to_dict(self) -> dict:
        return {"actions": self.actions, "total_cost_h": self.total_cost_h}

    @staticmethod
    def from_dict(obj: dict) -> "ExpertTrace":
        return ExpertTrace(
            actions=[None if a is None else int(a) for a in obj["actions"]],
            total_cost_h=float(obj["total_cost_h"]),
        )


def make_expert_trace(env: CoverageEnv) -> ExpertTrace:
    """Solve the full-information instance once and execute it in the
    synchronous rotation, recording the destination per turn."""
    plan = oracle_solver(env)
    recorder = _RecordingPolicy(PlanPolicy(plan))
    _, metrics = run_episode_sync(env, recorder)
    return ExpertTrace(actions=recorder.actions, total_cost_h=metrics.total_cost_h)


# ---------------------------------------------------------------------------
# Gradient steps
# ---------------------------------------------------------------------------


def il_step(
    store: ParamStore,
    cfg: PolicyConfig,
    episodes: list[tuple],
    train: bool = True,
) -> tuple[float, float]:
    """One teacher-forced pass over ``episodes`` (pairs of environment
    factory and expert trace).

    Accumulates d(mean episode cross-entropy sum)/d(params) into the
    store when ``train``; returns (loss, expert-action accuracy).  The
    loss is the batch mean of per-episode summed cross-entropies.
    """
    batch = len(episodes)
    total_loss = 0.0
    hits = 0
    decisions = 0
    for make_episode, trace in episodes:
        env = make_episode()
        policy = NetworkPolicy(store, cfg, mode="greedy")
        policy.force_actions = deque(trace.actions)

        def hook(agent_id, out, action):
            nonlocal total_loss, hits, decisions
            loss = cross_entropy(out.probs, action)
            total_loss += float(loss.value)
            if train:
                backward(loss, seed_grad=np.asarray(1.0 / batch))
            hits += int(out.chosen == action)
            decisions += 1

        policy.decision_hook = hook
        try:
            run_episode_sync(env, policy)
        except MaskedActionError as exc:
            raise ValueError(f"inconsistent expert trace: {exc}") from exc
        if policy.force_actions:
            raise ValueError("inconsistent expert trace: unused forced actions remain")
    return total_loss / batch, hits / max(decisions, 1)


def rl_step(
    store: ParamStore,
    cfg: PolicyConfig,
    episode_factories: list,
    seed: int = 0,
) -> dict | None:
    """One REINFORCE batch with rewards normalized across the batch.

    Pass one rolls out sampled actions and records them; pass two
    replays each episode and scales every decision's cross-entropy
    gradient by (normalized episode reward) / batch.  Returns summary
    statistics, or None (no update) when every episode cost the same and
    the normalization is undefined.
    """
    batch = len(episode_factories)
    if batch < 2:
        raise ValueError("reward normalization needs a batch of at least 2")
    recorded: list[list[int | None]] = []
    rewards = np.zeros(batch)
    for b, make_episode in enumerate(episode_factories):
        env = make_episode()
        policy = NetworkPolicy(store, cfg, mode="sample", seed=seed + b)
        recorder = _RecordingPolicy(policy)
        _, metrics = run_episode_sync(env, recorder)
        recorded.append(recorder.actions)
        rewards[b] = -metrics.total_cost_h
    std = float(rewards.std())
    if std < 1e-8:
        return None
    normalized = (rewards - rewards.mean()) / std

    loss_value = 0.0
    for b, make_episode in enumerate(episode_factories):
        env = make_episode()
        policy = NetworkPolicy(store, cfg, mode="greedy")
        policy.force_actions = deque(recorded[b])
        weight = float(normalized[b]) / batch

        def hook(agent_id, out, action, w=weight):
            nonlocal loss_value
            loss = cross_entropy(out.probs, action)
            loss_value += w * float(loss.value)
            backward(loss, seed_grad=np.asarray(w))

        policy.decision_hook = hook
        run_episode_sync(env, policy)
    return {
        "loss": loss_value,
        "reward_mean": float(rewards.mean()),
        "reward_std": std,
        "normalized": normalized.tolist(),
    }


# ---------------------------------------------------------------------------
# Full loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Desk-scale defaults; the reference regime (2000 graphs of up to 25
    nodes, batch 50, 5000 epochs) stays configurable."""

    mode: str = "il"
    n_graphs: int = 2000
    nodes: int = 25
    agents: int = 2
    batch_size: int = 50
    epochs: int = 5000
    lr: float = 1e-3
    decay_rate: float = 0.1
    decay_every: int = 2000
    iterations: int = 5
    traffic: bool = True
    multipass: MultiPassDistribution = field(default_factory=lambda: UNIFORM_1_3)
    val_fraction: float = 0.1
    val_every: int = 20
    checkpoint_every: int = 100
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self) -> None:
        if self.mode not in ("il", "rl"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        for name in ("n_graphs", "nodes", "agents", "batch_size", "epochs", "decay_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["multipass"] = self.multipass.to_dict()
        return d

    @staticmethod
    def from_dict(obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "multipass" in obj:
            obj["multipass"] = MultiPassDistribution.from_dict(obj["multipass"])
        return TrainConfig(**obj)


def episode_seed(config: TrainConfig, graph_index: int) -> int:
    return config.seed * 1_000_003 + 17 * graph_index + 11


def episode_factory(config: TrainConfig, graph_index: int):
    seed = episode_seed(config, graph_index)

    def build() -> CoverageEnv:
        return make_env(
            config.nodes,
            config.agents,
            seed=seed,
            multipass=config.multipass,
            traffic=config.traffic,
        )

    return build


def train(config: TrainConfig, policy_cfg: PolicyConfig | None = None) -> dict:
    """Run the configured loop; returns paths and final stats.

    Writes ``latest.fmck`` / ``best.fmck`` checkpoints, the model and
    train configs, and per-epoch JSONL metrics under ``config.out_dir``.
    Aborts with a state dump if the loss goes non-finite.
    """
    if policy_cfg is None:
        policy_cfg = PolicyConfig(iterations=config.iterations)
    os.makedirs(config.out_dir, exist_ok=True)
    store = init_policy_params(policy_cfg, seed=config.seed)
    rng = np.random.default_rng(config.seed)

    n_val = max(1, int(round(config.val_fraction * config.n_graphs)))
    n_train = config.n_graphs - n_val
    train_ids = list(range(n_train))
    val_ids = list(range(n_train, config.n_graphs))

    traces: dict[int, ExpertTrace] = {}

    def trace_for(idx: int) -> ExpertTrace:
        if idx not in traces:
            traces[idx] = make_expert_trace(episode_factory(config, idx)())
        return traces[idx]

    def il_batch(ids):
        return [(episode_factory(config, i), trace_for(i)) for i in ids]

    history_path = os.path.join(config.out_dir, "train_log.jsonl")
    history: list[dict] = []
    best_key = None
    latest = os.path.join(config.out_dir, "latest.fmck")
    best = os.path.join(config.out_dir, "best.fmck")

    from .policy import save_config

    save_config(policy_cfg, os.path.join(config.out_dir, "model_config.json"))
    atomic_write_text(
        os.path.join(config.out_dir, "train_config.json"),
        dump_json_canonical(config.to_dict()) + "\n",
    )

    for epoch in range(config.epochs):
        batch_ids = [int(i) for i in rng.choice(len(train_ids), size=min(config.batch_size, len(train_ids)), replace=False)]
        store.zero_grads()
        lr = decayed_lr(config.lr, epoch, config.decay_rate, config.decay_every)
        row: dict = {"epoch": epoch, "lr": lr}
        if config.mode == "il":
            loss, acc = il_step(store, policy_cfg, il_batch([train_ids[i] for i in batch_ids]))
            row.update(loss=loss, accuracy=acc)
        else:
            stats = rl_step(
                store,
                policy_cfg,
                [episode_factory(config, train_ids[i]) for i in batch_ids],
                seed=config.seed + epoch * 7919,
            )
            if stats is None:
                row.update(loss=0.0, skipped="zero reward variance")
                history.append(row)
                continue
            loss = stats["loss"]
            row.update(loss=loss, reward_mean=stats["reward_mean"], reward_std=stats["reward_std"])
        if not np.isfinite(loss):
            store.save(os.path.join(config.out_dir, "abort.fmck"))
            write_jsonl(history_path, history + [row])
            raise RuntimeError(f"non-finite loss at epoch {epoch}; state dumped")
        adam_step(store, lr=lr)

        if config.mode == "il" and (epoch % config.val_every == 0 or epoch == config.epochs - 1):
            val_loss, val_acc = il_step(store, policy_cfg, il_batch(val_ids), train=False)
            row.update(val_loss=val_loss, val_accuracy=val_acc)
            key = (val_acc, -val_loss)
            if best_key is None or key > best_key:
                best_key = key
                store.save(best)
        if epoch % config.checkpoint_every == 0 or epoch == config.epochs - 1:
            store.save(latest)
        history.append(row)

    store.save(latest)
    if best_key is None:
        store.save(best)
    write_jsonl(history_path, history)
    return {
        "latest": latest,
        "best": best,
        "log": history_path,
        "epochs": config.epochs,
        "history": history,
    }


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_policy(make_policy, episode_factories, sync: bool = False):
    """Run a policy over episodes (asynchronous loop by default).

    Returns (rows, aggregate, per-decision latencies in ms).  Rows hold
    only deterministic quantities; latency lives in the third value so
    callers can keep timing out of reproducible artifacts.  The first
    decision of every episode is excluded from latency (warm-up).
    """
    rows = []
    latencies: list[float] = []
    runner = run_episode_sync if sync else run_episode_async

    for i, make_episode in enumerate(episode_factories):
        env = make_episode()
        policy = make_policy()
        timings: list[float] = []
        original_act = policy.act

        def timed_act(view, agent_id, _orig=original_act, _t=timings):
            t0 = time.perf_counter()
            action = _orig(view, agent_id)
            _t.append((time.perf_counter() - t0) * 1000.0)
            return action

        policy.act = timed_act
        _, metrics = runner(env, policy)
        latencies.extend(timings[1:])
        rows.append(
            {
                "episode": i,
                "nodes": env.graph.n,
                "agents": env.n_agents,
                "total_cost_h": metrics.total_cost_h,
                "makespan_h": metrics.makespan_h,
                "gini": metrics.gini,
                "steps": metrics.steps,
            }
        )
    agg = {
        "episodes": len(rows),
        "mean_total_cost_h": float(np.mean([r["total_cost_h"] for r in rows])),
        "mean_makespan_h": float(np.mean([r["makespan_h"] for r in rows])),
        "mean_gini": float(np.mean([r["gini"] for r in rows])),
    }
    return rows, agg, latencies


def evaluate_checkpoint(
    ckpt_path: str,
    policy_cfg: PolicyConfig,
    episode_factories,
    eval_iterations: int | None = None,
):
    """Greedy asynchronous evaluation of a stored checkpoint."""
    store = ParamStore.load(ckpt_path)

    def make_policy():
        return NetworkPolicy(store, policy_cfg, mode="greedy", eval_iterations=eval_iterations)

    return evaluate_policy(make_policy, episode_factories)
