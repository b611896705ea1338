"""Stochastic graph recurrent networks for dynamic-graph link tasks."""

from .autodiff import (
    FixedBNConfig,
    FiniteDiffReport,
    Gradients,
    Tape,
    Tensor,
    backward,
    finite_diff_check,
    fixed_batch_norm,
    sparse_dense_matmul,
)
from .data import (
    DatasetMeta,
    EdgeSplit,
    PredictionTargets,
    Snapshot,
    SnapshotSequence,
    build_prediction_targets,
    identity_features,
    load_snapshots,
    save_snapshots,
    split_edges_detection,
    synthetic_dynamic_graph,
)
from .metrics import MetricsReport, average_precision, estimate_nll, evaluate_auc_ap, roc_auc
from .model import (
    ElboTerms,
    GaussianParams,
    ParameterStore,
    SgrnnConfig,
    decode,
    elbo_loss,
    init_parameters,
    kl_diag_gaussian,
    kl_floor,
    prepare_steps,
    rollout_predict,
)
from .sivi import sivi_loss, sivi_posterior_params
from .sparse import CsrMatrix
from .training import RunRecord, TrainConfig, adam_step, early_stopping_check, train
from .estimator import SGRNN

__version__ = "0.1.0"

__all__ = [
    "FixedBNConfig",
    "FiniteDiffReport",
    "Gradients",
    "Tape",
    "Tensor",
    "backward",
    "finite_diff_check",
    "fixed_batch_norm",
    "sparse_dense_matmul",
    "DatasetMeta",
    "EdgeSplit",
    "PredictionTargets",
    "Snapshot",
    "SnapshotSequence",
    "build_prediction_targets",
    "identity_features",
    "load_snapshots",
    "save_snapshots",
    "split_edges_detection",
    "synthetic_dynamic_graph",
    "MetricsReport",
    "average_precision",
    "estimate_nll",
    "evaluate_auc_ap",
    "roc_auc",
    "ElboTerms",
    "GaussianParams",
    "ParameterStore",
    "SgrnnConfig",
    "decode",
    "elbo_loss",
    "init_parameters",
    "kl_diag_gaussian",
    "kl_floor",
    "prepare_steps",
    "rollout_predict",
    "CsrMatrix",
    "RunRecord",
    "TrainConfig",
    "adam_step",
    "early_stopping_check",
    "train",
    "SGRNN",
    "__version__",
]
