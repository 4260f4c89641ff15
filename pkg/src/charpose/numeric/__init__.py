"""Minimal reverse-mode tensor core used by the heatmap network."""
from .gradcheck import grad_check, numeric_gradient, relative_error
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    absolute,
    add,
    affine,
    concat,
    constant,
    conv3d,
    conv_out_size,
    conv_transpose3d,
    conv_transpose_out_size,
    dropout,
    layer_norm,
    log_softmax_np,
    matmul,
    mean_all,
    mul,
    param,
    relu,
    reshape,
    scale,
    softmax,
    square,
    sub,
    sum_all,
    swapaxes,
    take_rows,
    weighted_cross_entropy,
)

__all__ = [name for name in dir() if not name.startswith("_")]
