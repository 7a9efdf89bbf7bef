"""Minimal reverse-mode automatic differentiation over float64 numpy arrays."""
from .ops import (
    abs,
    add,
    avg_pool2,
    bilinear_sample,
    clip,
    concat,
    conv2d,
    cumprod_exclusive,
    div,
    exp,
    gather,
    getitem,
    log,
    log_softmax,
    matmul,
    mean,
    min_over_axis,
    mul,
    neg,
    pow,
    relu,
    reshape,
    scatter_add,
    sigmoid,
    softmax,
    softplus,
    stack,
    sub,
    sum,
    transpose,
    trilinear_sample,
    where,
)
from .gradcheck import analytic_grad, gradcheck, numeric_grad, relative_error
from .optim import SGD, clip_grad_norm, sgd_step
from .tensor import Tape, Tensor, as_tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "analytic_grad",
    "gradcheck",
    "numeric_grad",
    "relative_error",
    "SGD",
    "Tape",
    "Tensor",
    "abs",
    "add",
    "as_tensor",
    "avg_pool2",
    "backward",
    "bilinear_sample",
    "clip",
    "clip_grad_norm",
    "concat",
    "conv2d",
    "cumprod_exclusive",
    "div",
    "exp",
    "gather",
    "getitem",
    "is_grad_enabled",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "min_over_axis",
    "mul",
    "neg",
    "no_grad",
    "pow",
    "relu",
    "reshape",
    "scatter_add",
    "sgd_step",
    "sigmoid",
    "softmax",
    "softplus",
    "stack",
    "sub",
    "sum",
    "transpose",
    "trilinear_sample",
    "where",
]
