"""Command line front end.

Verbs: generate, train, evaluate, sweep-agents, dist-shift, bench-tsp,
export-routes, export-heatmap.  Every artifact lands through atomic
writes; metric files are deterministic for a given seed and timing goes
to separate runtime files.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import time

import numpy as np

from . import tsp
from .baselines import GreedyPolicy, IterativeVRPPolicy, PlanPolicy, RandomPolicy, oracle_solver
from .env import (
    DISTRIBUTION_SHIFT_SUITE,
    make_env,
    run_episode_async,
    run_episode_sync,
)
from .graphs import generate_graph, save_graph
from .ioutil import atomic_write_text, dump_json_canonical, write_jsonl
from .nn import ParamStore
from .policy import NetworkPolicy, PolicyConfig, init_policy_params, load_config
from .training import TrainConfig, evaluate_policy, train

DIST_BY_NAME = dict(DISTRIBUTION_SHIFT_SUITE)


def _parse_range(spec: str, minimum: int = 1) -> tuple[int, int]:
    """"25" means exactly 25, "15:30" an inclusive range."""
    if ":" in spec:
        lo, hi = spec.split(":", 1)
        lo, hi = int(lo), int(hi)
    else:
        lo = hi = int(spec)
    if lo < minimum or hi < lo:
        raise argparse.ArgumentTypeError(f"bad range {spec!r}")
    return lo, hi


def _parse_nodes(spec: str) -> tuple[int, int]:
    return _parse_range(spec, minimum=2)


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _episode_factories(args, multipass=None, agents=None):
    dist = multipass if multipass is not None else DIST_BY_NAME[args.multipass]
    n_agents = agents if agents is not None else args.agents
    lo, hi = args.nodes
    rng = np.random.default_rng(args.seed)
    sizes = [int(rng.integers(lo, hi + 1)) for _ in range(args.episodes)]

    def factory(i):
        def build():
            return make_env(
                sizes[i],
                n_agents,
                seed=args.seed + 1000 * i,
                multipass=dist,
                traffic=not args.no_traffic,
            )

        return build

    return [factory(i) for i in range(args.episodes)]


def _model_from_args(args) -> tuple[ParamStore, PolicyConfig]:
    cfg = load_config(args.model_config) if args.model_config else PolicyConfig()
    if args.ckpt:
        store = ParamStore.load(args.ckpt)
    else:
        store = init_policy_params(cfg, seed=args.seed)
    return store, cfg


def _policy_maker(name: str, args, factories):
    """Closure building a fresh policy per episode, aligned with the
    factory order (the far-sighted planner re-derives the instance)."""
    if name == "model":
        store, cfg = _model_from_args(args)
        k = getattr(args, "iters", None)
        return lambda: NetworkPolicy(store, cfg, mode="greedy", eval_iterations=k)
    if name == "greedy":
        return lambda: GreedyPolicy()
    if name == "random":
        return lambda: RandomPolicy(seed=args.seed + 7919)
    if name == "vrp":
        return lambda: IterativeVRPPolicy()
    if name == "oracle":
        counter = itertools.count()

        def make():
            env = factories[next(counter)]()
            return PlanPolicy(oracle_solver(env))

        return make
    raise ValueError(f"unknown policy {name!r}")


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    os.makedirs(os.path.join(args.out, "graphs"), exist_ok=True)
    lo, hi = args.nodes
    rng = np.random.default_rng(args.seed)
    total = args.graphs + args.test
    files = []
    for i in range(total):
        n = int(rng.integers(lo, hi + 1))
        g = generate_graph(n, seed=args.seed + 1000 * i)
        rel = os.path.join("graphs", f"g_{i:04d}.json")
        save_graph(g, os.path.join(args.out, rel))
        files.append({"file": rel, "nodes": n, "seed": args.seed + 1000 * i})
    n_val = max(1, int(round(0.1 * args.graphs)))
    ids = list(range(args.graphs))
    manifest = {
        "seed": args.seed,
        "nodes": list(args.nodes),
        "files": files,
        "splits": {
            "train": ids[: args.graphs - n_val],
            "val": ids[args.graphs - n_val :],
            "test": list(range(args.graphs, total)),
        },
    }
    atomic_write_text(
        os.path.join(args.out, "manifest.json"), dump_json_canonical(manifest) + "\n"
    )
    print(f"wrote {total} graphs and manifest under {args.out}")
    return 0


def cmd_train(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    model_raw = raw.pop("model", None)
    if args.out:
        raw["out_dir"] = args.out
    config = TrainConfig(**raw)
    policy_cfg = PolicyConfig.from_dict(model_raw) if model_raw else None
    result = train(config, policy_cfg)
    last = result["history"][-1] if result["history"] else {}
    print(f"trained {result['epochs']} epochs; final loss {last.get('loss', float('nan')):.4f}")
    print(f"artifacts under {config.out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    factories = _episode_factories(args)
    make_policy = _policy_maker(args.policy, args, factories)
    rows, agg, latencies = evaluate_policy(make_policy, factories, sync=args.sync)
    os.makedirs(args.out, exist_ok=True)
    write_jsonl(os.path.join(args.out, "metrics.jsonl"), rows)
    agg = dict(agg, policy=args.policy, seed=args.seed)
    atomic_write_text(
        os.path.join(args.out, "aggregate.json"), dump_json_canonical(agg) + "\n"
    )
    lat = np.asarray(latencies) if latencies else np.zeros(1)
    runtime = {
        "decisions": len(latencies),
        "mean_ms": float(lat.mean()),
        "p50_ms": float(np.percentile(lat, 50)),
        "p95_ms": float(np.percentile(lat, 95)),
    }
    atomic_write_text(
        os.path.join(args.out, "runtime.json"), json.dumps(runtime, indent=1) + "\n"
    )
    print(
        f"{args.policy}: mean cost {agg['mean_total_cost_h']:.3f} h over "
        f"{agg['episodes']} episodes (metrics under {args.out})"
    )
    return 0


def cmd_sweep_agents(args) -> int:
    lo, hi = args.agents_range
    header = [
        "agents",
        "model_cost_h", "model_makespan_h", "model_gini",
        "greedy_cost_h", "greedy_makespan_h", "greedy_gini",
    ]
    rows = []
    for n_agents in range(lo, hi + 1):
        factories = _episode_factories(args, agents=n_agents)
        out = {}
        for name in ("model", "greedy"):
            _, agg, _ = evaluate_policy(_policy_maker(name, args, factories), factories)
            out[name] = agg
        rows.append(
            [
                n_agents,
                f"{out['model']['mean_total_cost_h']:.6f}",
                f"{out['model']['mean_makespan_h']:.6f}",
                f"{out['model']['mean_gini']:.6f}",
                f"{out['greedy']['mean_total_cost_h']:.6f}",
                f"{out['greedy']['mean_makespan_h']:.6f}",
                f"{out['greedy']['mean_gini']:.6f}",
            ]
        )
        print(f"agents={n_agents}: model {rows[-1][1]} h, greedy {rows[-1][4]} h")
    _write_csv(args.out, header, rows)
    print(f"sweep written to {args.out}")
    return 0


def cmd_dist_shift(args) -> int:
    header = [
        "distribution",
        "model_cost_h", "vrp_cost_h", "oracle_cost_h",
        "model_vs_oracle_pct", "vrp_vs_oracle_pct",
    ]
    rows = []
    for name, dist in DISTRIBUTION_SHIFT_SUITE:
        factories = _episode_factories(args, multipass=dist)
        cost = {}
        for policy in ("model", "vrp", "oracle"):
            _, agg, _ = evaluate_policy(_policy_maker(policy, args, factories), factories)
            cost[policy] = agg["mean_total_cost_h"]
        rows.append(
            [
                name,
                f"{cost['model']:.6f}",
                f"{cost['vrp']:.6f}",
                f"{cost['oracle']:.6f}",
                f"{100.0 * (cost['model'] / cost['oracle'] - 1.0):.2f}",
                f"{100.0 * (cost['vrp'] / cost['oracle'] - 1.0):.2f}",
            ]
        )
        print(f"{name}: model {rows[-1][1]} h, vrp {rows[-1][2]} h, oracle {rows[-1][3]} h")
    _write_csv(args.out, header, rows)
    print(f"shift table written to {args.out}")
    return 0


def cmd_bench_tsp(args) -> int:
    store, cfg = _model_from_args(args)
    methods = list(tsp.HEURISTICS) + ["model-greedy", "model-ss", "model-ss-sp"]
    lengths = {m: [] for m in methods}
    elapsed = {m: 0.0 for m in methods}
    refs = []
    for i in range(args.instances):
        rng = np.random.default_rng(args.seed + i)
        D = tsp.distance_matrix(tsp.random_points(args.k, rng))
        refs.append(tsp.best_found(D, seed=args.seed + i))
        for method in tsp.HEURISTICS:
            t0 = time.perf_counter()
            order = tsp.heuristic_tour(D, method, rng=np.random.default_rng(args.seed + i))
            elapsed[method] += time.perf_counter() - t0
            lengths[method].append(tsp.tour_length(D, order))
        t0 = time.perf_counter()
        greedy = tsp.tour_length(D, tsp.model_tour(store, cfg, D))
        elapsed["model-greedy"] += time.perf_counter() - t0
        t0 = time.perf_counter()
        _, ss = tsp.model_tour_ss(store, cfg, D)
        elapsed["model-ss"] += time.perf_counter() - t0
        t0 = time.perf_counter()
        _, sssp = tsp.model_tour_ss_sp(store, cfg, D, samples=args.samples, seed=args.seed + i)
        elapsed["model-ss-sp"] += time.perf_counter() - t0
        lengths["model-greedy"].append(greedy)
        lengths["model-ss"].append(ss)
        lengths["model-ss-sp"].append(sssp)
    refs_arr = np.asarray(refs)
    rows, runtime_rows = [], []
    for method in methods:
        arr = np.asarray(lengths[method])
        gap = 100.0 * float((arr / refs_arr - 1.0).mean())
        rows.append([method, f"{arr.mean():.6f}", f"{gap:.3f}"])
        runtime_rows.append([method, f"{1000.0 * elapsed[method] / args.instances:.3f}"])
        print(f"{method}: mean length {rows[-1][1]}, gap {gap:.2f}%")
    _write_csv(args.out, ["method", "mean_length", "gap_pct"], rows)
    root, ext = os.path.splitext(args.out)
    _write_csv(root + "_runtime" + ext, ["method", "ms_per_instance"], runtime_rows)
    print(f"benchmark written to {args.out}")
    return 0


def cmd_export_routes(args) -> int:
    from .exports import export_routes

    factories = _episode_factories(args)
    env = factories[0]()
    start_nodes = list(env.agent_nodes)
    policy = _policy_maker(args.policy, args, factories)()
    runner = run_episode_sync if args.sync else run_episode_async
    records, metrics = runner(env, policy)
    json_path, svg_path = export_routes(
        env, records, start_nodes, args.out_prefix, seed=args.layout_seed
    )
    print(f"episode cost {metrics.total_cost_h:.3f} h; wrote {json_path} and {svg_path}")
    return 0


def cmd_export_heatmap(args) -> int:
    from .exports import export_value_heatmap

    store, cfg = _model_from_args(args)
    make_episode = _episode_factories(args)[0]
    actions: list[int | None] = []
    policy = NetworkPolicy(store, cfg, mode="greedy")
    policy.decision_hook = lambda agent_id, out, action: actions.append(action)
    run_episode_sync(make_episode(), policy)
    json_path, svg_path = export_value_heatmap(
        store, cfg, make_episode, actions, args.step, args.out_prefix, seed=args.layout_seed
    )
    print(f"wrote {json_path} and {svg_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_eval_options(p, episodes_default=20):
    p.add_argument("--nodes", type=_parse_nodes, default=(25, 25), help="count or lo:hi range")
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--episodes", type=int, default=episodes_default)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--multipass", choices=sorted(DIST_BY_NAME), default="uniform_1_3")
    p.add_argument("--no-traffic", action="store_true")
    p.add_argument("--ckpt", help="checkpoint path (fresh seeded weights if omitted)")
    p.add_argument("--model-config", help="JSON model config written by train")
    p.add_argument("--iters", type=int, default=None, help="planning iterations override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fleetmap", description="multi-agent road coverage toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a reproducible graph dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--graphs", type=int, default=100)
    p.add_argument("--test", type=int, default=10)
    p.add_argument("--nodes", type=_parse_nodes, default=(25, 25))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="imitation/reinforcement training loop")
    p.add_argument("--config", required=True, help="JSON training config")
    p.add_argument("--out", help="override the output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run a policy and write metric files")
    _add_eval_options(p)
    p.add_argument(
        "--policy",
        choices=("model", "greedy", "random", "vrp", "oracle"),
        default="model",
    )
    p.add_argument("--sync", action="store_true", help="round-robin instead of event loop")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-agents", help="model vs greedy across fleet sizes")
    _add_eval_options(p)
    p.add_argument("--agents-range", type=_parse_range, default=(1, 9), metavar="LO:HI")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_sweep_agents)

    p = sub.add_parser("dist-shift", help="visit-requirement generalization table")
    _add_eval_options(p, episodes_default=10)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_dist_shift)

    p = sub.add_parser("bench-tsp", help="tour heuristics and model tours")
    p.add_argument("--k", type=int, default=25)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--samples", type=int, default=128, help="stochastic rollouts per instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ckpt")
    p.add_argument("--model-config")
    p.add_argument("--out", required=True, help="CSV path (runtime lands beside it)")
    p.set_defaults(func=cmd_bench_tsp)

    p = sub.add_parser("export-routes", help="episode routes as JSON and SVG")
    _add_eval_options(p, episodes_default=1)
    p.add_argument(
        "--policy",
        choices=("model", "greedy", "random", "vrp", "oracle"),
        default="model",
    )
    p.add_argument("--sync", action="store_true")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--layout-seed", type=int, default=0)
    p.set_defaults(func=cmd_export_routes)

    p = sub.add_parser("export-heatmap", help="decoder values at one decision")
    _add_eval_options(p, episodes_default=1)
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--layout-seed", type=int, default=0)
    p.set_defaults(func=cmd_export_heatmap)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
