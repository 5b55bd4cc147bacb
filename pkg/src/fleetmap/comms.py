"""Inter-agent messaging: inboxes and attention-weighted aggregation.

Each agent broadcasts its latest planner encoding (an n x c feature
matrix) after every decision; receivers keep only the most recent message
per sender.  At decision time the receiver scores each stored message
against its own last emitted message and mixes their value projections
into the communication input U fed to the planner.

The three aggregation projections are shared across nodes (one c x c
matrix each applied to every node row), so the score is the flattened
dot product of two n*c vectors while the parameter count stays
independent of graph size.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, constant, masked_softmax, mul, pick, sum_all
from .nn import ParamStore, linear

COMM_VARIANTS = ("attention", "commnet-mean", "maxpool")


class Inbox:
    """Latest message per sender, with optional receipt stamps."""

    def __init__(self, n_nodes: int, channels: int):
        self.n_nodes = int(n_nodes)
        self.channels = int(channels)
        self.messages: dict[int, np.ndarray] = {}
        self.stamps: dict[int, float | None] = {}

    def store(self, sender_id: int, message: np.ndarray, stamp: float | None = None) -> None:
        message = np.asarray(message, dtype=np.float64)
        if message.shape != (self.n_nodes, self.channels):
            raise ValueError(
                f"message shape {message.shape} does not match ({self.n_nodes}, {self.channels})"
            )
        self.messages[int(sender_id)] = message
        self.stamps[int(sender_id)] = stamp

    def snapshot(self) -> list[tuple[int, np.ndarray]]:
        """Stable (sender, message) view, ordered by sender id."""
        return [(s, self.messages[s]) for s in sorted(self.messages)]

    def __len__(self) -> int:
        return len(self.messages)


def init_comm_params(store: ParamStore, channels: int = 16) -> None:
    """Register the query/key/value projections used by ``aggregate``."""
    for name in ("comm_q", "comm_k", "comm_v"):
        store.add(f"{name}_W", (channels, channels))
        store.add(f"{name}_b", (channels,))


def aggregate(
    snapshot: list[tuple[int, np.ndarray]],
    self_message: np.ndarray | None,
    store: ParamStore,
    n_nodes: int,
    channels: int = 16,
) -> Tensor:
    """Attention-mix stored messages into the communication features U.

    Scores are flattened dot products between each sender's query
    projection and the key projection of the receiver's own last emitted
    message (zeros before the first emission).  An empty snapshot yields
    an exactly-zero U, which makes a single-agent fleet communication-free.
    """
    if not snapshot:
        return constant(np.zeros((n_nodes, channels)))
    if self_message is None:
        self_message = np.zeros((n_nodes, channels))
    key = linear(constant(np.asarray(self_message, dtype=np.float64)), store["comm_k_W"], store["comm_k_b"])
    scores = []
    values = []
    for _, message in snapshot:
        m = constant(np.asarray(message, dtype=np.float64))
        q = linear(m, store["comm_q_W"], store["comm_q_b"])
        scores.append(sum_all(mul(q, key)))
        values.append(linear(m, store["comm_v_W"], store["comm_v_b"]))
    logits = Tensor(
        np.array([float(s.value) for s in scores]),
        parents=tuple(scores),
        backward=lambda g: tuple(np.asarray(g[j]) for j in range(len(scores))),
    )
    alpha = masked_softmax(logits, np.ones(len(scores), dtype=bool))
    out = None
    for j, v in enumerate(values):
        term = mul(v, pick(alpha, j))
        out = term if out is None else add(out, term)
    return out


def aggregate_variant(
    kind: str,
    snapshot: list[tuple[int, np.ndarray]],
    self_message: np.ndarray | None,
    store: ParamStore,
    n_nodes: int,
    channels: int = 16,
) -> Tensor:
    """Dispatch between the learned aggregation and parameter-free ones.

    ``commnet-mean`` averages the stored messages elementwise; ``maxpool``
    takes the elementwise max.  Both are constants to the planner graph.
    """
    if kind not in COMM_VARIANTS:
        raise ValueError(f"unknown communication variant {kind!r}")
    if kind == "attention":
        return aggregate(snapshot, self_message, store, n_nodes, channels)
    if not snapshot:
        return constant(np.zeros((n_nodes, channels)))
    stacked = np.stack([m for _, m in snapshot])
    pooled = stacked.mean(axis=0) if kind == "commnet-mean" else stacked.max(axis=0)
    return constant(pooled)
