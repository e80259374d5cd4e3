"""Minimal dense-tensor engine: reverse-mode autodiff plus AdamW."""

from .ops import (
    absval,
    as_tensor,
    clipval,
    concat,
    conv2d,
    activation,
    cross_entropy,
    crop2d,
    elementwise,
    log,
    mean_channels,
    norm_loss,
    pad2d,
    pool_and_resize,
    reciprocal,
    slice_batch,
    spatial_gradient,
)
from .optim import AdamW, AdamWState, adamw_step
from .tensor import (
    Tape,
    Tensor,
    active_tape,
    backward,
    default_dtype,
    no_grad,
    precision,
    set_debug_checks,
    set_default_dtype,
    use_tape,
)

__all__ = [
    "Tensor", "Tape", "backward", "use_tape", "no_grad", "active_tape",
    "precision", "default_dtype", "set_default_dtype", "set_debug_checks",
    "elementwise", "conv2d", "activation", "spatial_gradient", "norm_loss",
    "pool_and_resize", "cross_entropy", "concat", "pad2d", "crop2d",
    "mean_channels", "absval", "reciprocal", "log", "clipval",
    "slice_batch", "as_tensor",
    "AdamW", "AdamWState", "adamw_step",
]
