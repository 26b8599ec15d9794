"""Decentralized finite-sum optimization over time-varying gossip networks."""

from .network import (
    GossipMatrix,
    GraphSequence,
    RandomGeometricSequence,
    RotatingStarSequence,
    StaticSequence,
    TwoStarHopSequence,
    WeightedGraph,
    apply_mixing,
    chebyshev_mix,
    gossip_from_laplacian,
    measure_chi,
    multi_stage_mix,
)
from .objectives import (
    DatasetShard,
    FiniteSumObjective,
    SmoothnessInfo,
    batch_gradient,
    finite_difference_check,
    full_gradient,
    logistic_objective,
    nlls_objective,
)
from .hardinstances import (
    lower_bound_value,
    nonconvex_hard_objective,
    prog,
    progress_audit,
    strongly_convex_chain,
    zero_chain_l,
)
from .optimizers import (
    AdomVr,
    GtBaseline,
    GtPage,
    RunBudgets,
    RunTrace,
    adom_vr_params,
    gt_page_params,
    run,
)
from .harness import ExperimentConfig, parse_libsvm, partition_dataset, reference_solution, run_experiment

__version__ = "0.1.0"
