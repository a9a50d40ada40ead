"""Tensor arithmetic, reverse-mode differentiation and small dense linear algebra."""

from dualsync.numerics.gradcheck import central_difference, numeric_gradient, relative_error
from dualsync.numerics.linalg import jacobi_eigh, psd_sqrt, psd_sqrt_with_clamp
from dualsync.numerics.tensor import (
    Graph,
    Tensor,
    add,
    concat,
    current_graph,
    div,
    exp,
    gelu,
    getitem,
    huber,
    layernorm,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    reshape,
    sigmoid,
    silu,
    softmax,
    square,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "Graph", "Tensor", "add", "central_difference", "concat", "current_graph", "div", "exp", "gelu",
    "getitem", "huber", "jacobi_eigh", "layernorm", "log", "matmul", "mean", "mul",
    "neg", "no_grad", "numeric_gradient", "psd_sqrt", "psd_sqrt_with_clamp", "relative_error", "reshape", "sigmoid", "silu",
    "softmax", "square", "sub", "swapaxes", "tanh", "transpose", "tsum",
]
