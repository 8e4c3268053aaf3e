"""Minimal tensor engine: reverse-mode autodiff, layers, AdamW, one-cycle schedule."""

from .optim import AdamW, adamw_step, clip_grad_norm, onecycle_lr
from .autodiff import (
    Tensor,
    add,
    concat,
    cross_entropy,
    div,
    embedding,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mse_masked,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    softmax,
    sqrt,
    sub,
    sum_,
    take,
    tanh,
    tensor,
    transpose,
)

__all__ = [
    "AdamW", "Tensor", "adamw_step", "add", "clip_grad_norm", "concat", "cross_entropy", "div",
    "embedding", "exp", "gelu", "getitem", "layer_norm", "log", "log_softmax", "matmul", "mean",
    "mse_masked", "mul", "no_grad", "onecycle_lr", "relu", "reshape", "scale", "softmax", "sqrt",
    "sub", "sum_", "take", "tanh", "tensor", "transpose",
]
