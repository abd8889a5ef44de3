"""Minimal reverse-mode differentiable tensor engine."""

from .gradcheck import (
    FD_SUITE,
    GradCheckResult,
    analytic_gradients,
    directional_gradcheck,
    fd_case,
    gradcheck,
)
from .ops import (
    absval,
    add,
    avgpool2x,
    bilinear_upsample2x,
    conv2d,
    conv_transpose2d,
    hadamard,
    instance_norm,
    relu,
    scale,
    sub,
    tanh,
    tmean,
    tsum,
)
from .tensor import Tape, Tensor, active_tape, backward, set_debug_checks

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "active_tape",
    "set_debug_checks",
    "add",
    "sub",
    "hadamard",
    "scale",
    "relu",
    "tanh",
    "absval",
    "tsum",
    "tmean",
    "conv2d",
    "conv_transpose2d",
    "bilinear_upsample2x",
    "avgpool2x",
    "instance_norm",
    "gradcheck",
    "directional_gradcheck",
    "analytic_gradients",
    "GradCheckResult",
    "fd_case",
    "FD_SUITE",
]
