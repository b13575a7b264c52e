from app.engine.gradcheck import grad_check
from app.engine.ops import (
    add,
    concat_channels,
    conv2d,
    div,
    elementwise,
    gelu,
    mean,
    mean_over_set,
    mul,
    repeat_set,
    reshape,
    resize2,
    scale,
    shift,
    sigmoid,
    slice_channels,
    sub,
    sum_per_sample,
    total,
)
from app.engine.optim import AdamState, adam_step, clip_grad_norm
from app.engine.tensor import Tape, Tensor, backward

__all__ = [
    "AdamState",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "clip_grad_norm",
    "concat_channels",
    "conv2d",
    "div",
    "elementwise",
    "gelu",
    "grad_check",
    "mean",
    "mean_over_set",
    "mul",
    "repeat_set",
    "reshape",
    "resize2",
    "scale",
    "shift",
    "sigmoid",
    "slice_channels",
    "sub",
    "sum_per_sample",
    "total",
]
