"""Minimal numpy tensor library with tape-based reverse-mode differentiation."""

from . import ops
from .gradcheck import GradCheckReport, grad_check, grad_check_params
from .ops import (
    add,
    concat,
    cross_entropy,
    dropout,
    embedding_lookup,
    gelu,
    layer_norm,
    log_sigmoid,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    row_softmax,
    scale,
    sigmoid,
    sub,
    transpose,
)
from .tensor import (
    Parameter,
    Tape,
    TapeEntry,
    Tensor,
    backward,
    current_tape,
    default_dtype,
    fresh_tape,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "ops", "GradCheckReport", "grad_check", "grad_check_params", "add", "concat",
    "cross_entropy", "dropout", "embedding_lookup", "gelu", "layer_norm", "log_sigmoid",
    "matmul", "mean", "mul", "relu", "reshape", "row_softmax", "scale", "sigmoid", "sub",
    "transpose", "Parameter", "Tape", "TapeEntry", "Tensor", "backward", "current_tape",
    "default_dtype", "fresh_tape", "get_default_dtype", "is_grad_enabled", "no_grad",
    "set_default_dtype",
]
