"""Differentiable dense tensor arithmetic."""

from .functional import dropout, layer_norm, softmax
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    is_grad_enabled,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    stack,
    sub,
    sum_,
    transpose,
)

__all__ = [
    "Tensor", "add", "as_tensor", "backward", "check_gradients", "concat", "dropout",
    "is_grad_enabled", "layer_norm", "matmul", "mean", "mul", "no_grad",
    "numerical_gradient", "relative_error", "relu", "reshape", "softmax", "stack",
    "sub", "sum_", "transpose",
]
