"""Minimal float64 tensor engine with reverse-mode differentiation."""
from . import ops
from .functional import cosine_distance, cosine_similarity, cross_entropy, linear
from .gradcheck import grad_check, grad_check_tensors
from .ops import (
    abs,
    add,
    broadcast_to,
    clamp_min,
    concat,
    div,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    masked_softmax,
    matmul,
    mean,
    mul,
    neg,
    norm,
    relu,
    reshape,
    smooth_l1,
    softmax,
    softplus,
    sqrt,
    sub,
    sum,
    swapaxes,
    transpose,
)
from .serialize import read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor
from .tensor import Tape, Tensor, as_tensor, current_tape, grad_enabled, no_grad

__all__ = [name for name in dir() if not name.startswith("_")]
