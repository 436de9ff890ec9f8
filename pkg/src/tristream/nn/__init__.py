"""Differentiable-computation core: tensors, layer ops, SGD, gradient checks."""

from .gradcheck import GradCheckReport, grad_check
from .ops import (
    BCE_EPS,
    bce_loss,
    concat,
    concat_channels,
    conv2d,
    fully_connected,
    global_avg_pool,
    maxpool2d,
    relu,
    sigmoid_normalize,
    upsample2x,
)
from .optim import OptimizerConfig, Parameter, sgd_step
from .tensor import Tensor, as_tensor, no_grad

__all__ = [
    "BCE_EPS",
    "GradCheckReport",
    "OptimizerConfig",
    "Parameter",
    "Tensor",
    "as_tensor",
    "bce_loss",
    "concat",
    "concat_channels",
    "conv2d",
    "fully_connected",
    "global_avg_pool",
    "grad_check",
    "maxpool2d",
    "no_grad",
    "relu",
    "sgd_step",
    "sigmoid_normalize",
    "upsample2x",
]
