"""Post-ranking familiarity debiasing toolkit.

Estimates the conditional mean of a rating-prediction score given per-user
familiarity features (empirical bucket table or small regressor), divides it
out before final ranking, and ships a seeded closed-loop simulator plus an
offline experiment harness to measure what the correction does to watch-time
and exposure-diversity metrics.
"""

from .bucketizer import AdjustmentTable, BucketEdges, assign_cell, fit_edges, fit_table, lookup
from .core import (
    FamiliarityVector,
    FeatureSchema,
    Interaction,
    InteractionLog,
    PopularityTable,
    compute_popularity,
    read_jsonl,
    validate_log,
    write_jsonl,
)
from .debias import (
    CombinerWeights,
    DebiasConfig,
    SlateCandidate,
    debias_score,
    debias_slate,
    rank_score,
    residual_correlation,
)
from .estimator import RegressorModel, TrainConfig, forward, gradient_check, mse_loss, train
from .simulator import InflationSpec, SessionConfig, SessionState, Universe, run_experiment

__version__ = "0.1.0"

__all__ = [
    "AdjustmentTable",
    "BucketEdges",
    "CombinerWeights",
    "DebiasConfig",
    "FamiliarityVector",
    "FeatureSchema",
    "InflationSpec",
    "Interaction",
    "InteractionLog",
    "PopularityTable",
    "RegressorModel",
    "SessionConfig",
    "SessionState",
    "SlateCandidate",
    "TrainConfig",
    "Universe",
    "assign_cell",
    "compute_popularity",
    "debias_score",
    "debias_slate",
    "fit_edges",
    "fit_table",
    "forward",
    "gradient_check",
    "lookup",
    "mse_loss",
    "rank_score",
    "read_jsonl",
    "residual_correlation",
    "run_experiment",
    "train",
    "validate_log",
    "write_jsonl",
]
