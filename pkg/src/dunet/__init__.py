"""Diffusion Units for point-cloud segmentation: a learned explicit diffusion
step used as the decoder block of a small encoder-decoder network, with the
geometry, autodiff, data and analysis tooling it needs."""

from .du import ABLATION_TABLE, DUAblationConfig, DULayer, du_ablation, du_forward, du_stack
from .geom import PointCloud, farthest_point_sample, grid_subsample, interp_weights, knn
from .net import DUNet, NetworkSpec, StageSpec, default_spec, segment

__version__ = "0.1.0"

__all__ = [
    "ABLATION_TABLE", "DUAblationConfig", "DULayer", "DUNet", "NetworkSpec", "PointCloud",
    "StageSpec", "default_spec", "du_ablation", "du_forward", "du_stack", "farthest_point_sample",
    "grid_subsample", "interp_weights", "knn", "segment",
]
