"""Federated learning over space-air-ground integrated networks.

The package simulates one ground site served by a low-Earth-orbit
constellation, a layer of aerial relays, and clusters of ground devices, and
optimizes where each round's training data should live so that the slowest
layer finishes as early as possible.

Modules build on each other in this order: ``constellation`` (orbits, passes,
coverage), ``linkmodel`` (rates and transfer delays), ``latency`` (completion
times), ``offload`` (the load-balancing planner), ``flcore`` (datasets,
training, aggregation), ``diagnostics`` (convergence constants and bounds),
and ``harness`` (end-to-end experiments behind the ``sagfed`` CLI).
"""

__version__ = "0.1.0"

from .constellation import (
    GroundSite,
    NoServingSatelliteError,
    OrbitalShell,
    SatellitePass,
    build_walker_star,
    coverage_windows,
    pass_sequence,
)
from .latency import (
    ClusterState,
    ComputeLoad,
    DeviceState,
    RoundLatency,
    SaginState,
    SpaceInfeasibleError,
    SpaceLayerJob,
    compute_time,
    round_latency_no_offload,
    round_latency_with_plan,
    space_layer_latency,
)
from .linkmodel import LinkParams, PayloadSizes, a2s_rate, g2a_rate, isl_rate, transfer_delay
from .offload import (
    BisectionTrace,
    OffloadPlan,
    apply_plan,
    classify_direction,
    optimize_round,
    zero_plan,
)
from .flcore import (
    DatasetLedger,
    LocalTrainConfig,
    LogisticModel,
    ModelState,
    PartitionSpec,
    QuadraticMeanModel,
    SyntheticTask,
    TwoLayerNetModel,
    aggregate,
    evaluate,
    local_sgd,
    make_blobs_task,
    node_rng,
    partition,
    satellite_training_with_handover,
)
from .diagnostics import (
    ConvergenceConstants,
    estimate_constants,
    max_learning_rate,
    theorem1_bound,
    validate_bound,
)
from .harness import (
    ExperimentConfig,
    RoundReport,
    baseline_plan,
    export_metrics,
    read_metrics,
    run_experiment,
    time_to_target,
)

__all__ = [
    "GroundSite",
    "NoServingSatelliteError",
    "OrbitalShell",
    "SatellitePass",
    "build_walker_star",
    "coverage_windows",
    "pass_sequence",
    "ClusterState",
    "ComputeLoad",
    "DeviceState",
    "RoundLatency",
    "SaginState",
    "SpaceInfeasibleError",
    "SpaceLayerJob",
    "compute_time",
    "round_latency_no_offload",
    "round_latency_with_plan",
    "space_layer_latency",
    "LinkParams",
    "PayloadSizes",
    "a2s_rate",
    "g2a_rate",
    "isl_rate",
    "transfer_delay",
    "BisectionTrace",
    "OffloadPlan",
    "apply_plan",
    "classify_direction",
    "optimize_round",
    "zero_plan",
    "DatasetLedger",
    "LocalTrainConfig",
    "LogisticModel",
    "ModelState",
    "PartitionSpec",
    "QuadraticMeanModel",
    "SyntheticTask",
    "TwoLayerNetModel",
    "aggregate",
    "evaluate",
    "local_sgd",
    "make_blobs_task",
    "node_rng",
    "partition",
    "satellite_training_with_handover",
    "ConvergenceConstants",
    "estimate_constants",
    "max_learning_rate",
    "theorem1_bound",
    "validate_bound",
    "ExperimentConfig",
    "RoundReport",
    "baseline_plan",
    "export_metrics",
    "read_metrics",
    "run_experiment",
    "time_to_target",
    "__version__",
]
