from .adam import AdamState, adam_step
from .ops import (
    activation,
    add,
    avg_pool,
    bilinear_upsample,
    broadcast_mul,
    channel_mean,
    channel_slice_concat,
    concat_channels,
    conv2d,
    global_avg_pool,
    half_sq_error,
    linear,
    max_pool2,
    relu,
    scale,
    sigmoid,
    softplus,
    transposed_conv2d,
)
from .tensor import Parameter, Tensor

__all__ = [
    "AdamState", "Parameter", "Tensor", "activation", "adam_step", "add", "avg_pool",
    "bilinear_upsample", "broadcast_mul", "channel_mean", "channel_slice_concat",
    "concat_channels", "conv2d", "global_avg_pool", "half_sq_error", "linear",
    "max_pool2", "relu", "scale", "sigmoid", "softplus", "transposed_conv2d",
]
