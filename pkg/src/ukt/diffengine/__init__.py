"""Small reverse-mode differentiation engine over numpy arrays."""

from .gradcheck import compare, gradcheck, numeric_grad
from .kernels import conv_backend, get_conv_backend, set_conv_backend
from .ops import (
    OPS,
    abs,
    add,
    concat_channels,
    conv2d,
    conv_transpose2d,
    div,
    forward_diff,
    group_norm,
    leaky_relu,
    linear_map,
    log,
    maxpool2,
    mean,
    mul,
    relu_project,
    scale,
    softplus,
    sqrt,
    square,
    sub,
    sum,
)
from .tensor import Tape, Tensor, backward, current_tape, default_dtype, get_default_dtype, set_default_dtype

__all__ = [
    "OPS", "Tape", "Tensor", "abs", "add", "backward", "compare", "concat_channels", "conv2d",
    "conv_backend", "conv_transpose2d", "current_tape", "default_dtype", "div", "forward_diff",
    "get_conv_backend", "get_default_dtype", "gradcheck", "group_norm", "leaky_relu", "linear_map",
    "log", "maxpool2", "mean", "mul", "numeric_grad", "relu_project", "scale", "set_conv_backend",
    "set_default_dtype", "softplus", "sqrt", "square", "sub", "sum",
]
