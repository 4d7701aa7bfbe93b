"""Data-driven discretization of high-dimensional covariates for dynamic discrete choice models."""

__version__ = "0.1.0"

from .nfxp import (
    EstimationError,
    NFXPEstimator,
    ThetaEstimate,
    TransitionTable,
    ValueFunction,
    choice_probabilities,
    estimate_theta,
    estimate_transition,
    value_iteration,
)
from .objective import DegenerateDataError, ObjectiveValue, SmoothingConfig, f_dc, f_tr, lambda_adj
from .panel import CountTables, Observation, Panel, count_tables, load_panel, split_train_validation, write_panel
from .partitioner import (
    Hyperparameters,
    RecursivePartitioner,
    SplitCandidate,
    discretize,
    enumerate_candidates,
    evaluate_split,
    tune,
)
from .simulator import (
    DgpConfig,
    QTransition,
    TruePartitionSpec,
    match_partitions,
    random_discretization,
    sim1_truth,
    simulate,
    transition_q,
)
from .tree import Discretization

__all__ = [
    "CountTables",
    "DegenerateDataError",
    "DgpConfig",
    "Discretization",
    "EstimationError",
    "Hyperparameters",
    "NFXPEstimator",
    "ObjectiveValue",
    "Observation",
    "Panel",
    "QTransition",
    "RecursivePartitioner",
    "SmoothingConfig",
    "SplitCandidate",
    "ThetaEstimate",
    "TransitionTable",
    "TruePartitionSpec",
    "ValueFunction",
    "choice_probabilities",
    "count_tables",
    "discretize",
    "enumerate_candidates",
    "estimate_theta",
    "estimate_transition",
    "evaluate_split",
    "f_dc",
    "f_tr",
    "lambda_adj",
    "load_panel",
    "match_partitions",
    "random_discretization",
    "sim1_truth",
    "simulate",
    "split_train_validation",
    "transition_q",
    "tune",
    "value_iteration",
    "write_panel",
]
