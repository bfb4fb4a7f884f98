"""Differentiable substrate: tensors, ops, and the gradient-check harness."""

from .gradcheck import GradCheckReport, grad_check
from .ops import (
    BatchNormParams,
    BatchNormState,
    ResidualBlockParams,
    adaptive_avg_pool_2d,
    adaptive_spans,
    add,
    average_matrix,
    batch_norm_2d,
    bilinear_matrix,
    bilinear_resize,
    bilinear_upsample_2x,
    conv2d,
    div,
    drop_index,
    elementwise_add,
    exp,
    global_avg_pool,
    l2_normalize,
    linear,
    log,
    logsumexp,
    max_pool_2d,
    mul,
    region_max_pool,
    relu,
    reshape,
    residual_block,
    softmax_cross_entropy,
    softplus,
    sub,
    take,
    tanh,
    tmean,
    tsum,
)
from .tensor import Tensor

__all__ = [
    "Tensor",
    "grad_check",
    "GradCheckReport",
    "BatchNormParams",
    "BatchNormState",
    "ResidualBlockParams",
    "adaptive_avg_pool_2d",
    "adaptive_spans",
    "add",
    "average_matrix",
    "batch_norm_2d",
    "bilinear_matrix",
    "bilinear_resize",
    "bilinear_upsample_2x",
    "conv2d",
    "div",
    "drop_index",
    "elementwise_add",
    "exp",
    "global_avg_pool",
    "l2_normalize",
    "linear",
    "log",
    "logsumexp",
    "max_pool_2d",
    "mul",
    "region_max_pool",
    "relu",
    "reshape",
    "residual_block",
    "softmax_cross_entropy",
    "softplus",
    "sub",
    "take",
    "tanh",
    "tmean",
    "tsum",
]
