"""Minimal dense tensor kernel with reverse-mode gradients."""

from . import nn, ops
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .ops import (
    bilinear_resize,
    conv2d,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    resize_nearest,
    sigmoid,
    softmax,
)
from .optim import SGD
from .tensor import (
    DimensionError,
    Tensor,
    UnregisteredParameterError,
    as_tensor,
    default_dtype,
    get_default_dtype,
    gradient,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "DimensionError",
    "SGD",
    "Tensor",
    "UnregisteredParameterError",
    "as_tensor",
    "bilinear_resize",
    "check_gradients",
    "conv2d",
    "gelu",
    "get_default_dtype",
    "gradient",
    "layer_norm",
    "masked_softmax",
    "matmul",
    "nn",
    "no_grad",
    "numerical_gradient",
    "ops",
    "relative_error",
    "resize_nearest",
    "default_dtype",
    "set_default_dtype",
    "sigmoid",
    "softmax",
]
