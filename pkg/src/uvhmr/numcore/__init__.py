"""Tape-based reverse-mode autodiff on float64 numpy arrays."""

from .engine import (
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    check_finite,
    concat,
    conv2d,
    cos,
    cosine_similarity,
    div,
    exp,
    gather,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    scatter_mean,
    sin,
    softmax_over_spatial,
    sqrt,
    square,
    stack,
    stop_gradient,
    strided_conv2d,
    sub,
    sum_,
    transpose,
    where,
)
from .gradcheck import finite_difference_check
from .optim import AdamState, adam_step

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "AdamState",
    "adam_step",
    "add",
    "backward",
    "check_finite",
    "concat",
    "conv2d",
    "cos",
    "cosine_similarity",
    "div",
    "exp",
    "finite_difference_check",
    "gather",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "relu",
    "reshape",
    "scatter_mean",
    "sin",
    "softmax_over_spatial",
    "sqrt",
    "square",
    "stack",
    "stop_gradient",
    "strided_conv2d",
    "sub",
    "sum_",
    "transpose",
    "where",
]
