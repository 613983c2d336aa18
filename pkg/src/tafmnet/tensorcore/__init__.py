"""Minimal dense tensors with reverse-mode automatic differentiation."""
from .gradcheck import finite_difference_check
from .ops import (
    BatchNormState,
    activation,
    add,
    batch_norm2d,
    bilinear_upsample2x,
    broadcast_to,
    clip,
    concat_channels,
    conv2d,
    depthwise_conv2d,
    depthwise_separable_conv2d,
    div,
    dropout,
    exp,
    gelu,
    global_average_broadcast,
    log,
    matmul,
    mean,
    mul,
    pointwise,
    power,
    relu,
    reshape,
    sigmoid,
    slice_channels,
    softmax,
    sub,
    swap_last,
    transpose,
)
from .ops import sum as tsum
from .tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    default_dtype,
    grad_enabled,
    no_grad,
    reset_tape,
    set_default_dtype,
    set_finite_checks,
    use_dtype,
)

__all__ = [
    "BatchNormState", "Tape", "Tensor", "activation", "add", "as_tensor", "backward",
    "batch_norm2d", "bilinear_upsample2x", "broadcast_to", "clip", "concat_channels",
    "conv2d", "current_tape", "default_dtype", "depthwise_conv2d",
    "depthwise_separable_conv2d", "div", "dropout", "exp", "finite_difference_check",
    "gelu", "global_average_broadcast", "grad_enabled", "log", "matmul", "mean", "mul",
    "no_grad", "pointwise", "power", "relu", "reset_tape", "reshape", "set_default_dtype",
    "set_finite_checks", "sigmoid", "slice_channels", "softmax", "sub", "swap_last", "transpose", "tsum",
    "use_dtype",
]
