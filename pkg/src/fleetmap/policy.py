"""The planning network: iterative attention + recurrence over the dense
distance matrix, producing per-node values, a masked action distribution,
and the broadcast message.

One forward pass is one action decision.  Node features and communication
input are encoded to width 16, refined for K rounds (attention constructs
a learned transition matrix from pairwise scores fused with the dense
adjacency; an LSTM cell turns the attended features into a residual
update), then decoded to a scalar per node and masked-softmaxed over the
still-selectable nodes.

Ablation switches:
  * ``dense_adjacency`` off feeds binary connectivity instead of the
    normalized travel-time matrix to the fusion network.
  * ``attention`` off replaces the learned transition matrix with the
    row-normalized binary adjacency (self-loops added).
  * ``lstm`` off replaces the recurrent update with one linear + ReLU.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from . import comms
from .autodiff import Tensor, add, concat_cols, constant, masked_softmax, matmul, relu, reshape, row_softmax
from .env import EnvView, Policy
from .graphs import DEFAULT_COMM_CHANNELS, NODE_FEATURE_DIM
from .ioutil import atomic_write_text
from .nn import ParamStore, attention_scores, linear, lstm_cell, mlp_relu


@dataclass(frozen=True)
class PolicyConfig:
    """Network shape and ablation flags; defaults are the full model."""

    node_features: int = NODE_FEATURE_DIM
    channels: int = DEFAULT_COMM_CHANNELS
    hidden: int = 16
    iterations: int = 5
    attention: bool = True
    dense_adjacency: bool = True
    lstm: bool = True
    comm: str = "attention"

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.comm not in comms.COMM_VARIANTS:
            raise ValueError(f"unknown communication variant {self.comm!r}")

    def to_dict(self) -> dict:
        return {
            "node_features": self.node_features,
            "channels": self.channels,
            "hidden": self.hidden,
            "iterations": self.iterations,
            "attention": self.attention,
            "dense_adjacency": self.dense_adjacency,
            "lstm": self.lstm,
            "comm": self.comm,
        }

    @staticmethod
    def from_dict(obj: dict) -> "PolicyConfig":
        return PolicyConfig(**obj)


def save_config(cfg: PolicyConfig, path: str) -> None:
    atomic_write_text(path, json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


def load_config(path: str) -> PolicyConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return PolicyConfig.from_dict(json.load(fh))


def init_policy_params(cfg: PolicyConfig, seed: int = 0) -> ParamStore:
    """Create every learnable tensor for the configured variant."""
    store = ParamStore(seed=seed)
    d = cfg.hidden
    store.add("enc_W", (cfg.node_features + cfg.channels, d))
    store.add("enc_b", (d,))
    for name in ("att_q", "att_k", "att_v"):
        store.add(f"{name}_W", (d, d))
        store.add(f"{name}_b", (d,))
    widths = [2, d, d, d, 1]
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
        store.add(f"fus{i}_W", (w_in, w_out))
        store.add(f"fus{i}_b", (w_out,))
    if cfg.lstm:
        for gate in "ifog":
            store.add(f"lstm_{gate}_x", (d, d))
            store.add(f"lstm_{gate}_h", (d, d))
            store.add(f"lstm_{gate}_b", (d,))
    else:
        store.add("upd_W", (d, d))
        store.add("upd_b", (d,))
    store.add("dec_W", (d, 1))
    store.add("dec_b", (1,))
    if cfg.comm == "attention":
        comms.init_comm_params(store, cfg.channels)
    return store


def _fusion_layers(store: ParamStore) -> list[tuple[Tensor, Tensor]]:
    return [(store[f"fus{i}_W"], store[f"fus{i}_b"]) for i in range(4)]


def _lstm_params(store: ParamStore) -> dict:
    return {
        gate: (store[f"lstm_{gate}_x"], store[f"lstm_{gate}_h"], store[f"lstm_{gate}_b"])
        for gate in "ifog"
    }


def encode(store: ParamStore, X: Tensor, U: Tensor) -> Tensor:
    """Concatenate node and communication features, project to width d."""
    return linear(concat_cols(X, U), store["enc_W"], store["enc_b"])


def row_normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """Binary connectivity with self-loops, rows scaled to sum to one."""
    mix = np.asarray(adjacency, dtype=np.float64) + np.eye(adjacency.shape[0])
    return mix / mix.sum(axis=1, keepdims=True)


def attention_block(
    store: ParamStore,
    Xk: Tensor,
    A: np.ndarray,
    cfg: PolicyConfig,
    row_mix: np.ndarray | None = None,
) -> Tensor:
    """One round of feature mixing; returns the attended value matrix.

    With attention disabled the learned transition matrix is replaced by
    ``row_mix`` (row-normalized binary adjacency).
    """
    n = Xk.value.shape[0]
    V = linear(Xk, store["att_v_W"], store["att_v_b"])
    if not cfg.attention:
        if row_mix is None:
            raise ValueError("attention disabled but no fallback transition matrix given")
        return matmul(constant(row_mix), V)
    Q = linear(Xk, store["att_q_W"], store["att_q_b"])
    K = linear(Xk, store["att_k_W"], store["att_k_b"])
    S = attention_scores(Q, K)
    pair = concat_cols(reshape(S, (n * n, 1)), constant(A.reshape(n * n, 1)))
    logits = reshape(mlp_relu(pair, _fusion_layers(store)), (n, n))
    return matmul(row_softmax(logits), V)


def value_iterate(
    store: ParamStore,
    cfg: PolicyConfig,
    X0: Tensor,
    A: np.ndarray,
    K: int | None = None,
    row_mix: np.ndarray | None = None,
) -> Tensor:
    """K rounds of attend-then-update with a residual connection.

    The recurrent state starts at zero for every decision and is carried
    only across the K planner rounds within it.
    """
    K = cfg.iterations if K is None else int(K)
    if K < 1:
        raise ValueError("iteration count must be >= 1")
    n, d = X0.value.shape
    h = constant(np.zeros((n, d)))
    c = constant(np.zeros((n, d)))
    Xk = X0
    lstm_p = _lstm_params(store) if cfg.lstm else None
    for _ in range(K):
        mixed = attention_block(store, Xk, A, cfg, row_mix)
        if cfg.lstm:
            h, c = lstm_cell(mixed, h, c, lstm_p)
            Xk = add(Xk, h)
        else:
            Xk = add(Xk, relu(linear(mixed, store["upd_W"], store["upd_b"])))
    return Xk


def decode_values(store: ParamStore, XK: Tensor) -> Tensor:
    n = XK.value.shape[0]
    return reshape(linear(XK, store["dec_W"], store["dec_b"]), (n,))


@dataclass
class PolicyOutput:
    """Everything one decision produces."""

    values: np.ndarray
    probs: Tensor
    chosen: int
    log_prob: float
    message: np.ndarray
    encoding: np.ndarray


def decode_and_select(
    values: Tensor,
    mask: np.ndarray,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
) -> tuple[int, Tensor]:
    """Masked softmax plus action choice.

    Greedy picks the highest-probability selectable node, ties resolved
    toward the lowest node id; sampling draws from the masked distribution.
    """
    probs = masked_softmax(values, mask)
    if mode == "greedy":
        chosen = int(np.argmax(probs.value))
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs a random generator")
        p = probs.value / probs.value.sum()
        chosen = int(rng.choice(p.size, p=p))
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return chosen, probs


def adjacency_input(view: EnvView, cfg: PolicyConfig) -> np.ndarray:
    """The pairwise matrix fed to the planner for this configuration."""
    if cfg.dense_adjacency:
        return view.dd.A
    return view.graph.adjacency_matrix() + np.eye(view.graph.n)


def decide(
    store: ParamStore,
    cfg: PolicyConfig,
    view: EnvView,
    agent_id: int,
    snapshot: list[tuple[int, np.ndarray]],
    self_message: np.ndarray | None,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    K: int | None = None,
) -> PolicyOutput:
    """One full decision: communication, encoding, planning, selection."""
    n = view.graph.n
    U = comms.aggregate_variant(cfg.comm, snapshot, self_message, store, n, cfg.channels)
    X = constant(view.features(agent_id, np.zeros((n, cfg.channels))).X)
    mask = view.selectable()
    A = adjacency_input(view, cfg)
    row_mix = None if cfg.attention else row_normalized_adjacency(view.graph.adjacency_matrix())
    XK = value_iterate(store, cfg, encode(store, X, U), A, K=K, row_mix=row_mix)
    values = decode_values(store, XK)
    chosen, probs = decode_and_select(values, mask, mode=mode, rng=rng)
    return PolicyOutput(
        values=values.value.copy(),
        probs=probs,
        chosen=chosen,
        log_prob=float(np.log(probs.value[chosen])),
        message=XK.value.copy(),
        encoding=XK.value.copy(),
    )


class NetworkPolicy(Policy):
    """Adapter that drives the network inside the episode loops.

    Supports teacher forcing (``force_actions``) and a per-decision
    ``decision_hook(agent_id, output, action)`` used by the trainers;
    neither changes the message flow, which always comes from the
    network's own forward passes.
    """

    def __init__(
        self,
        store: ParamStore,
        cfg: PolicyConfig,
        mode: str = "greedy",
        seed: int = 0,
        eval_iterations: int | None = None,
    ):
        self.store = store
        self.cfg = cfg
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self.eval_iterations = eval_iterations
        self.force_actions: deque[int] | None = None
        self.decision_hook = None
        self.inboxes: list[comms.Inbox] = []
        self.last_sent: list[np.ndarray | None] = []

    def begin_episode(self, view: EnvView, n_agents: int) -> None:
        n = view.graph.n
        self.inboxes = [comms.Inbox(n, self.cfg.channels) for _ in range(n_agents)]
        self.last_sent = [None] * n_agents

    def act(self, view: EnvView, agent_id: int) -> int | None:
        if self.force_actions is not None:
            if not self.force_actions:
                raise ValueError("inconsistent expert trace: ran out of forced actions")
            if self.force_actions[0] is None:
                # Forced idle turn: no decision, no message update.
                self.force_actions.popleft()
                return None
        out = decide(
            self.store,
            self.cfg,
            view,
            agent_id,
            self.inboxes[agent_id].snapshot(),
            self.last_sent[agent_id],
            mode=self.mode,
            rng=self.rng,
            K=self.eval_iterations,
        )
        action = out.chosen
        if self.force_actions is not None:
            action = int(self.force_actions.popleft())
        if self.decision_hook is not None:
            self.decision_hook(agent_id, out, action)
        self.last_sent[agent_id] = out.message
        return action

    def outgoing_message(self, agent_id: int):
        return self.last_sent[agent_id]

    def deliver(self, agent_id: int, sender_id: int, message) -> None:
        self.inboxes[agent_id].store(sender_id, message)


def ablation_config(attention: bool = True, dense_adjacency: bool = True, lstm: bool = True, **kw) -> PolicyConfig:
    """Named construction of the studied variants."""
    return replace(PolicyConfig(**kw), attention=attention, dense_adjacency=dense_adjacency, lstm=lstm)
