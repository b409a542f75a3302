"""Minimal reverse-mode autodiff over numpy arrays."""
from .tensor import Parameter, Tape, Tensor, active_tape, check_finite, leaf_checks_only
from .ops import (
    BatchNormState,
    add,
    batch_norm,
    channel_mix,
    channel_softmax,
    concat_channels,
    conv2d,
    gather_channels,
    kink_trace,
    global_avg_pool,
    linear,
    max_pool2d,
    multiply,
    relu,
    relu_batch_norm,
    scale,
    slice_channels,
    spatial_permute,
    sum_all,
    tile_expand,
    tile_layout,
    transposed_conv2d,
    weighted_sum,
)
from .gradcheck import GradcheckReport, gradcheck, spot_check

__all__ = [
    "Tensor", "Parameter", "Tape", "active_tape", "check_finite", "leaf_checks_only", "BatchNormState",
    "add", "batch_norm", "kink_trace", "channel_mix", "channel_softmax", "concat_channels", "conv2d",
    "gather_channels", "global_avg_pool", "linear", "max_pool2d", "multiply", "relu", "relu_batch_norm", "scale",
    "slice_channels", "spatial_permute", "sum_all", "tile_expand", "tile_layout", "transposed_conv2d", "weighted_sum",
    "GradcheckReport", "gradcheck", "spot_check",
]
