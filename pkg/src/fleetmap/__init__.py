"""fleetmap: multi-vehicle street-network coverage planning.

A numpy-only stack for routing a small fleet over a road graph whose
per-segment visit requirements and congestion are hidden until driven:
graph model and dense distances, a partially observable episode
environment, a hand-rolled reverse-mode autodiff core, an attention +
recurrence planning network with inter-agent messaging, classical
baselines and oracles, imitation / policy-gradient training, and
benchmark tooling.
"""

from .graphs import (
    CONGESTION_CAP,
    CONGESTION_GAMMA,
    DEFAULT_COMM_CHANNELS,
    NODE_FEATURE_DIM,
    DenseDistance,
    FeatureMatrix,
    GraphError,
    NodeAttr,
    RoadGraph,
    build_features,
    congestion_factor,
    dense_distance,
    edge_time_weight,
    floyd_warshall,
    generate_graph,
    graph_from_dict,
    graph_to_dict,
    load_graph,
    normalize_distance,
    save_graph,
    shortest_path,
)
from .env import (
    DISTRIBUTION_SHIFT_SUITE,
    UNIFORM_1_3,
    CoverageEnv,
    EnvView,
    EpisodeConfig,
    EpisodeMetrics,
    HiddenState,
    MaskedActionError,
    MultiPassDistribution,
    NonTerminatingPolicyError,
    Policy,
    StepRecord,
    StepResult,
    gini,
    make_env,
    run_episode_async,
    run_episode_sync,
    sample_hidden,
    traffic_equilibrium,
)
from .autodiff import Tensor, backward, constant, grad_check
from .nn import ParamStore, adam_step, decayed_lr
from .comms import Inbox, aggregate, aggregate_variant
from .policy import (
    NetworkPolicy,
    PolicyConfig,
    ablation_config,
    init_policy_params,
    load_config,
    save_config,
)
from .baselines import (
    GreedyPolicy,
    IterativeVRPPolicy,
    Plan,
    PlanPolicy,
    RandomPolicy,
    cheapest_insertion,
    exhaustive_oracle,
    improve_routes,
    oracle_solver,
    solve_routes,
)
from .training import (
    TrainConfig,
    evaluate_checkpoint,
    evaluate_policy,
    il_step,
    make_expert_trace,
    rl_step,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "CONGESTION_CAP",
    "CONGESTION_GAMMA",
    "DEFAULT_COMM_CHANNELS",
    "DISTRIBUTION_SHIFT_SUITE",
    "NODE_FEATURE_DIM",
    "UNIFORM_1_3",
    "CoverageEnv",
    "DenseDistance",
    "EnvView",
    "EpisodeConfig",
    "EpisodeMetrics",
    "FeatureMatrix",
    "GraphError",
    "GreedyPolicy",
    "HiddenState",
    "Inbox",
    "IterativeVRPPolicy",
    "MaskedActionError",
    "MultiPassDistribution",
    "NetworkPolicy",
    "NodeAttr",
    "NonTerminatingPolicyError",
    "ParamStore",
    "Plan",
    "PlanPolicy",
    "Policy",
    "PolicyConfig",
    "RandomPolicy",
    "RoadGraph",
    "StepRecord",
    "StepResult",
    "Tensor",
    "TrainConfig",
    "ablation_config",
    "adam_step",
    "aggregate",
    "aggregate_variant",
    "backward",
    "build_features",
    "cheapest_insertion",
    "congestion_factor",
    "constant",
    "decayed_lr",
    "dense_distance",
    "edge_time_weight",
    "evaluate_checkpoint",
    "evaluate_policy",
    "exhaustive_oracle",
    "floyd_warshall",
    "generate_graph",
    "gini",
    "grad_check",
    "graph_from_dict",
    "graph_to_dict",
    "il_step",
    "improve_routes",
    "init_policy_params",
    "load_config",
    "load_graph",
    "make_env",
    "make_expert_trace",
    "normalize_distance",
    "oracle_solver",
    "rl_step",
    "run_episode_async",
    "run_episode_sync",
    "sample_hidden",
    "save_config",
    "save_graph",
    "shortest_path",
    "solve_routes",
    "traffic_equilibrium",
    "train",
]
