"""Training the learned planner for a minute and looking inside it.

Imitation learning on a small corpus: a full-information solver writes
expert routes, and the network learns to reproduce them from what a
vehicle can actually observe.  Afterwards we race the result against
the greedy baseline, inspect one decision's probabilities, and export a
driven-route picture.
"""

import os
import tempfile

import numpy as np

from fleetmap import (
    GreedyPolicy,
    NetworkPolicy,
    ParamStore,
    PolicyConfig,
    TrainConfig,
    evaluate_checkpoint,
    evaluate_policy,
    make_env,
    run_episode_sync,
    train,
)
from fleetmap.exports import export_routes

out_dir = os.path.join(tempfile.gettempdir(), "fleetmap_demo_run")
cfg = TrainConfig(
    mode="il",
    n_graphs=24,
    nodes=8,
    agents=2,
    batch_size=8,
    epochs=40,
    iterations=3,
    seed=0,
    val_every=10,
    out_dir=out_dir,
)
print(f"imitation run: {cfg.n_graphs} graphs of {cfg.nodes} nodes, "
      f"{cfg.epochs} epochs, batch {cfg.batch_size}")

result = train(cfg, PolicyConfig(iterations=3))
print("expert-action accuracy on the validation split:")
for row in result["history"]:
    if "val_accuracy" in row:
        print(f"  epoch {row['epoch']:4d}  {100 * row['val_accuracy']:.1f}%")
print(f"checkpoints under {out_dir}: best.fmck, latest.fmck")

# held-out race against the greedy heuristic
test = [lambda s=s: make_env(8, 2, seed=9_000 + s) for s in range(20)]
_, model_agg, _ = evaluate_checkpoint(result["best"], PolicyConfig(iterations=3), test)
_, greedy_agg, _ = evaluate_policy(GreedyPolicy, test)
model_cost = model_agg["mean_total_cost_h"]
greedy_cost = greedy_agg["mean_total_cost_h"]
print(f"\nheld-out mean cost: model {model_cost:.3f} h, greedy {greedy_cost:.3f} h "
      f"({100 * (greedy_cost - model_cost) / greedy_cost:+.1f}% vs greedy)")

# drive a full episode with the trained planner, peeking at one decision
store = ParamStore.load(result["best"])
policy = NetworkPolicy(store, PolicyConfig(iterations=3), mode="greedy")
peek = []
policy.decision_hook = lambda agent_id, out, action: peek.append((agent_id, out, action))
env = make_env(8, 2, seed=9_001)
starts = list(env.agent_nodes)
records, metrics = run_episode_sync(env, policy)

agent, out, action = peek[len(peek) // 2]  # a mid-episode decision
order = np.argsort(-out.probs.value)
print(f"\nmid-episode, vehicle {agent} chooses segment {action}; its top picks:")
for v in order[:3]:
    print(f"  segment {v}: p={out.probs.value[v]:.3f}")
masked = int((out.probs.value == 0.0).sum())
print(f"{masked} segments are already covered and hold exactly zero probability")

# export the driven routes as JSON plus an SVG picture
json_path, svg_path = export_routes(env, records, starts, os.path.join(out_dir, "routes"))
print(f"\nepisode done in {metrics.total_cost_h:.3f} h; wrote {json_path} and {svg_path}")
