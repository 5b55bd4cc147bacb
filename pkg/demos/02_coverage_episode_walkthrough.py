"""Watching one mapping episode unfold, then scoring the baselines.

Two vehicles have to drive every street segment until its hidden
revisit requirement is met.  Requirements and congestion are invisible:
a visit only reveals "done" or "needs more", and driving a segment
reveals its congestion.  The walkthrough steps a greedy policy by hand,
then four baselines race on fresh instances.
"""

import numpy as np

from fleetmap import (
    GreedyPolicy,
    IterativeVRPPolicy,
    PlanPolicy,
    RandomPolicy,
    evaluate_policy,
    make_env,
    oracle_solver,
    run_episode_sync,
)

env = make_env(12, 2, seed=5)
print(f"instance: {env.graph.n} segments, {env.n_agents} vehicles")
print(f"hidden revisit requirements: {env.hidden.M.tolist()} (policies never see this)")
print(f"spawns at {list(env.agent_nodes)} count as the first visit there\n")

policy = GreedyPolicy()
for step in range(6):
    agent = step % env.n_agents
    view = env.view()
    target = policy.act(view, agent)
    before = int(env.visits[target])
    result = env.step(agent, target)
    after = int(env.visits[target])
    state = "covered" if env.fully_covered[target] else f"needs more ({after}/{env.hidden.M[target]})"
    print(f"step {step}: vehicle {agent} -> segment {target:2d}  "
          f"{result.cost_s:6.1f} s  visits {before}->{after}  {state}")

done = int(env.fully_covered.sum())
print(f"\nafter 6 steps: {done}/{env.graph.n} segments covered, "
      f"{env.explored.sum()}/{env.graph.n} congestion values revealed")

# let the greedy policy finish the job
records, metrics = run_episode_sync(env, policy)
print(f"greedy finishes in {metrics.steps} more moves, "
      f"total {metrics.total_cost_h:.3f} vehicle-hours\n")

# same battlefield, four strategies, ten fresh instances each
factories = [lambda i=i: make_env(12, 2, seed=100 + i) for i in range(10)]


def oracle_maker():
    plans = iter([oracle_solver(f()) for f in factories])
    return lambda: PlanPolicy(next(plans))


contenders = [
    ("random walk", lambda: RandomPolicy(seed=1)),
    ("greedy nearest", GreedyPolicy),
    ("replanning vrp", IterativeVRPPolicy),
    ("full-info oracle", oracle_maker()),
]
print("mean cost over 10 hidden-information instances:")
for name, maker in contenders:
    _, agg, _ = evaluate_policy(maker, factories)
    print(f"  {name:18s} {agg['mean_total_cost_h']:.3f} h")
print("\nthe oracle plans with the hidden state revealed, so it bounds the rest")
