"""Minimal point-network machinery: primitives with analytic gradients,
two small networks (fragment classifier, per-point segmenter), Adam, and a
flat-file parameter format."""

from .ops import (
    ball_group,
    farthest_point_sample,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    softmax,
    weighted_ce_backward,
    weighted_ce_forward,
)
from .params import NetworkParams, load_params, save_params, write_loss_csv
from .train import Adam, TrainSpec, TrainingDivergedError, inverse_frequency_weights

__all__ = [
    "ball_group", "farthest_point_sample",
    "linear_forward", "linear_backward", "relu_forward", "relu_backward",
    "softmax", "weighted_ce_forward", "weighted_ce_backward",
    "NetworkParams", "load_params", "save_params", "write_loss_csv",
    "Adam", "TrainSpec", "TrainingDivergedError", "inverse_frequency_weights",
]
