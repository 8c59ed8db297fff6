"""Small reverse-mode differentiation engine over float64 numpy arrays."""

from .checkpoint import CheckpointError, load_params, save_params
from .nn import MLP, BatchNorm, Linear, Module
from .ops import (
    BatchNormState,
    add,
    batch_norm,
    concat,
    cross_entropy_label_smoothing,
    gather_diff,
    gather_feat,
    interpolate,
    linear,
    max_over_neighbors,
    mean_over_neighbors,
    ordered_sum,
    relu,
    sum_over_neighbors,
    take_rows,
    weighted_sum,
)
from .optim import SGD, AdamW, adamw_step, cosine_lr, sgd_step
from .tensor import NonFiniteError, Tensor

__all__ = [
    "AdamW", "BatchNorm", "BatchNormState", "CheckpointError", "Linear", "MLP", "Module",
    "NonFiniteError", "SGD", "Tensor", "adamw_step", "add", "batch_norm", "concat",
    "cosine_lr", "cross_entropy_label_smoothing", "gather_diff", "gather_feat",
    "interpolate", "linear", "load_params", "max_over_neighbors", "mean_over_neighbors",
    "ordered_sum", "relu", "save_params", "sgd_step", "sum_over_neighbors", "take_rows",
    "weighted_sum",
]
