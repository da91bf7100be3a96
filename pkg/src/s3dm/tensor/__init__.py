from .core import Tensor, Tape, ParamStore, active_tape, backward
from .ops import (
    ACTIVATION_KINDS,
    absval,
    activation,
    add,
    as_tensor,
    avg_pool,
    avg_pool2d,
    bilinear_interp2d,
    broadcast_to,
    concat,
    conv2d,
    conv3d,
    linear,
    matmul,
    mean,
    mul,
    neg,
    normalize,
    relu,
    reshape,
    rsqrt,
    scale,
    sigmoid,
    silu,
    square,
    sub,
    tanh_,
    time_embedding,
    tsum,
    upsample2x,
)
from .optim import AdamW, adamw_step

__all__ = [
    "Tensor", "Tape", "ParamStore", "active_tape", "backward",
    "ACTIVATION_KINDS", "absval", "activation", "add", "as_tensor",
    "avg_pool", "avg_pool2d", "bilinear_interp2d", "broadcast_to", "concat",
    "conv2d", "conv3d", "linear", "matmul", "mean", "mul", "neg", "normalize",
    "relu", "reshape", "rsqrt", "scale", "sigmoid", "silu", "square", "sub",
    "tanh_", "time_embedding", "tsum", "upsample2x", "AdamW", "adamw_step",
]
