"""Differentiable-computation substrate: tensors, ops, Adam, gradient checks."""

from .conv import conv3d, conv3d_replay, conv_output_shape, tconv3d, tconv_output_shape
from .gradcheck import GradCheckReport, GradCheckRow, grad_check
from .ops import (
    abs_,
    add,
    bias_add,
    broadcast_spatial,
    concat,
    cross_entropy_logits,
    matmul,
    mean_all,
    mul,
    narrow,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    softplus,
    sub,
    sum_all,
    tanh,
)
from .optim import Param, ParamStore, adam_step
from .tensor import Tensor

__all__ = [
    "Tensor",
    "Param",
    "ParamStore",
    "adam_step",
    "grad_check",
    "GradCheckReport",
    "GradCheckRow",
    "conv3d",
    "conv3d_replay",
    "tconv3d",
    "conv_output_shape",
    "tconv_output_shape",
    "abs_",
    "add",
    "bias_add",
    "broadcast_spatial",
    "concat",
    "cross_entropy_logits",
    "matmul",
    "mean_all",
    "mul",
    "narrow",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "softplus",
    "sub",
    "sum_all",
    "tanh",
]
