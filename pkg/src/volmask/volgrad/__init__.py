"""Minimal numpy tensor core with a reverse-mode gradient tape."""

from .functional import (
    DimensionError,
    batchnorm3d,
    conv3d,
    crop_spatial,
    dropout,
    flatten,
    leaky_relu,
    linear,
    maxpool3d,
    pad_spatial_end,
    softmax,
    softmax_cross_entropy,
)
from .optim import he_init, sgd_step
from .tensor import GradientTape, Tensor, active_tape

__all__ = [
    "DimensionError",
    "GradientTape",
    "Tensor",
    "active_tape",
    "batchnorm3d",
    "conv3d",
    "crop_spatial",
    "dropout",
    "flatten",
    "he_init",
    "leaky_relu",
    "linear",
    "maxpool3d",
    "pad_spatial_end",
    "sgd_step",
    "softmax",
    "softmax_cross_entropy",
]
