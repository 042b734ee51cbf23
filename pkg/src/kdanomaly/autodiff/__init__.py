"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .ops import (
    add,
    conv2d,
    conv_output_size,
    global_avg_pool,
    l2_normalize,
    linear,
    masked_fill,
    matmul,
    mean,
    mse_loss,
    mul,
    relu,
    reshape,
    rot90,
    softmax_cross_entropy,
    sub,
    transpose,
    upsample_nearest,
)
from .ops import sum as tsum
from .optim import Adam, AdamState, adam_step
from .tensor import Tape, Tensor, active_tape, as_tensor

__all__ = [
    "Adam",
    "AdamState",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "add",
    "as_tensor",
    "conv2d",
    "conv_output_size",
    "global_avg_pool",
    "l2_normalize",
    "linear",
    "masked_fill",
    "matmul",
    "mean",
    "mse_loss",
    "mul",
    "relu",
    "reshape",
    "rot90",
    "softmax_cross_entropy",
    "sub",
    "transpose",
    "tsum",
    "upsample_nearest",
]
