"""Numerical engine: layers, losses, optimisers and gradient checking."""
from .functional import (activation, batchnorm, conv2d_backward, conv2d_forward,
                         elu, same_padding, sigmoid, softmax)
from .gradcheck import GradCheckReport, gradient_check, relative_error
from .layers import (LAYER_KINDS, BatchNorm, Conv2D, Dense, Elu, GlobalAvgPool,
                     Layer, MaxPool, Sigmoid, Softmax, layer_from_spec)
from .losses import LossSpec, loss
from .optim import RULES, OptimizerState, lr_schedule, optimizer_step

__all__ = [
    "LAYER_KINDS", "RULES", "BatchNorm", "Conv2D", "Dense", "Elu", "GlobalAvgPool",
    "GradCheckReport", "Layer", "LossSpec", "MaxPool", "OptimizerState", "Sigmoid",
    "Softmax", "activation", "batchnorm", "conv2d_backward", "conv2d_forward", "elu",
    "gradient_check", "layer_from_spec", "loss", "lr_schedule", "optimizer_step",
    "relative_error", "same_padding", "sigmoid", "softmax",
]
