"""Plot-ready exports: route logs and per-node value heatmaps as JSON,
rendered to SVG over a seeded force-directed embedding (synthetic graphs
carry no coordinates, so the layout is part of the artifact and must be
reproducible)."""

from __future__ import annotations

import json

import numpy as np

from .env import CoverageEnv, StepRecord
from .graphs import RoadGraph, graph_to_dict
from .ioutil import atomic_write_text, dump_json_canonical
from .nn import ParamStore
from .policy import NetworkPolicy, PolicyConfig

AGENT_PALETTE = (
    "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#e377c2", "#17becf", "#bcbd22",
)


def force_layout(graph: RoadGraph, seed: int = 0, iterations: int = 250) -> np.ndarray:
    """Fruchterman-Reingold embedding into the unit square, seeded."""
    n = graph.n
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0.0, 1.0, size=(n, 2))
    k = 1.0 / np.sqrt(n)
    pairs = {(min(u, v), max(u, v)) for u, v in graph.edges}
    temp = 0.1
    for _ in range(iterations):
        delta = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt((delta**2).sum(axis=2)) + 1e-9
        repulse = (k * k / dist**2)[:, :, None] * delta
        np.einsum("iij->ij", repulse)[:] = 0.0
        disp = repulse.sum(axis=1)
        for u, v in pairs:
            d = pos[u] - pos[v]
            r = np.sqrt((d**2).sum()) + 1e-9
            pull = (r / k) * d
            disp[u] -= pull
            disp[v] += pull
        length = np.sqrt((disp**2).sum(axis=1, keepdims=True)) + 1e-9
        pos += disp / length * np.minimum(length, temp)
        temp *= 0.97
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return (pos - lo) / span


def _svg_header(width: int, height: int) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]


def render_graph_svg(
    graph: RoadGraph,
    pos: np.ndarray,
    node_fill=None,
    node_label=None,
    routes: list[list[int]] | None = None,
    width: int = 640,
) -> str:
    """Graph drawing with optional per-node colors and per-agent routes."""
    pad = 40
    scale = width - 2 * pad
    xy = pos * scale + pad
    out = _svg_header(width, width)
    for u, v in graph.edges:
        out.append(
            f'<line x1="{xy[u,0]:.1f}" y1="{xy[u,1]:.1f}" x2="{xy[v,0]:.1f}" '
            f'y2="{xy[v,1]:.1f}" stroke="#cccccc" stroke-width="1"/>'
        )
    if routes:
        for i, route in enumerate(routes):
            color = AGENT_PALETTE[i % len(AGENT_PALETTE)]
            for a, b in zip(route, route[1:]):
                out.append(
                    f'<line x1="{xy[a,0]:.1f}" y1="{xy[a,1]:.1f}" x2="{xy[b,0]:.1f}" '
                    f'y2="{xy[b,1]:.1f}" stroke="{color}" stroke-width="2.5" opacity="0.75"/>'
                )
    for v in range(graph.n):
        fill = node_fill[v] if node_fill is not None else "#4477aa"
        out.append(
            f'<circle cx="{xy[v,0]:.1f}" cy="{xy[v,1]:.1f}" r="9" fill="{fill}" '
            f'stroke="#222222" stroke-width="0.8"/>'
        )
        label = str(v) if node_label is None else node_label[v]
        out.append(
            f'<text x="{xy[v,0]:.1f}" y="{xy[v,1]+3.2:.1f}" font-size="8" '
            f'text-anchor="middle" fill="white">{label}</text>'
        )
    out.append("</svg>")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Routes
# ---------------------------------------------------------------------------


def route_export(
    env: CoverageEnv, records: list[StepRecord], start_nodes: list[int]
) -> dict:
    """Per-agent visit sequences with cumulative driving-time stamps."""
    agents = []
    for a in range(env.n_agents):
        t = 0.0
        stops = [{"node": int(start_nodes[a]), "t_h": 0.0}]
        for r in records:
            if r.agent_id != a:
                continue
            t += r.cost_s / 3600.0
            stops.append({"node": int(r.action), "t_h": round(t, 9)})
        agents.append({"id": a, "route": stops})
    return {
        "agents": agents,
        "visit_counts": [int(c) for c in env.visits],
        "graph": graph_to_dict(env.graph),
    }


def export_routes(
    env: CoverageEnv,
    records: list[StepRecord],
    start_nodes: list[int],
    out_prefix: str,
    seed: int = 0,
) -> tuple[str, str]:
    """Write <prefix>.json and <prefix>.svg; returns both paths."""
    payload = route_export(env, records, start_nodes)
    json_path = out_prefix + ".json"
    svg_path = out_prefix + ".svg"
    atomic_write_text(json_path, dump_json_canonical(payload) + "\n")
    pos = force_layout(env.graph, seed=seed)
    routes = [[s["node"] for s in agent["route"]] for agent in payload["agents"]]
    covered = env.fully_covered
    fills = ["#55aa55" if covered[v] else "#aaaaaa" for v in range(env.graph.n)]
    atomic_write_text(svg_path, render_graph_svg(env.graph, pos, fills, routes=routes))
    return json_path, svg_path


def load_route_export(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    for agent in payload["agents"]:
        stamps = [s["t_h"] for s in agent["route"]]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValueError(f"agent {agent['id']}: timestamps decrease")
    return payload


# ---------------------------------------------------------------------------
# Value heatmaps
# ---------------------------------------------------------------------------


def replay_decisions(
    store: ParamStore,
    cfg: PolicyConfig,
    make_episode,
    actions: list[int | None],
):
    """Re-run a recorded episode, returning (agent, node values, mask)
    for every non-idle decision in order."""
    from .env import run_episode_sync
    from collections import deque

    env = make_episode()
    policy = NetworkPolicy(store, cfg, mode="greedy")
    policy.force_actions = deque(actions)
    captured: list[tuple[int, np.ndarray, np.ndarray]] = []

    def hook(agent_id, out, action):
        captured.append((agent_id, out.values.copy(), out.probs.value > 0))

    policy.decision_hook = hook
    run_episode_sync(env, policy)
    return captured


def export_value_heatmap(
    store: ParamStore,
    cfg: PolicyConfig,
    make_episode,
    actions: list[int | None],
    step: int,
    out_prefix: str,
    seed: int = 0,
) -> tuple[str, str]:
    """Heatmap of the decoder's node values at one recorded decision.

    Masked (fully covered) nodes carry the tag "masked" in the JSON and
    a neutral color in the SVG.
    """
    captured = replay_decisions(store, cfg, make_episode, actions)
    if not (0 <= step < len(captured)):
        raise ValueError(f"step {step} out of range (episode has {len(captured)} decisions)")
    agent, values, selectable = captured[step]
    env = make_episode()
    payload = {
        "step": step,
        "agent": int(agent),
        "values": [
            float(values[v]) if selectable[v] else "masked" for v in range(len(values))
        ],
    }
    json_path = out_prefix + ".json"
    svg_path = out_prefix + ".svg"
    atomic_write_text(json_path, dump_json_canonical(payload) + "\n")

    live = values[selectable]
    lo, hi = (float(live.min()), float(live.max())) if live.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    fills = []
    for v in range(env.graph.n):
        if not selectable[v]:
            fills.append("#dddddd")
        else:
            heat = (values[v] - lo) / span
            red = int(60 + 195 * heat)
            blue = int(220 - 160 * heat)
            fills.append(f"#{red:02x}50{blue:02x}")
    pos = force_layout(env.graph, seed=seed)
    atomic_write_text(svg_path, render_graph_svg(env.graph, pos, fills))
    return json_path, svg_path
