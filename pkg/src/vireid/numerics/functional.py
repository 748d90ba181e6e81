"""Composite functions built from the primitive ops."""
import numpy as np

from ..errors import ContractError, ShapeError
from . import ops
from .tensor import Tensor, as_tensor

NORM_FLOOR = 1e-12


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis``.

    Each norm is floored at 1e-12, so a zero vector yields similarity 0
    instead of NaN.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise ShapeError(f"cosine_similarity: lengths differ, {a.shape} vs {b.shape}")
    dot = ops.sum(ops.mul(a, b), axis=axis)
    na = ops.clamp_min(ops.norm(a, axis=axis), NORM_FLOOR)
    nb = ops.clamp_min(ops.norm(b, axis=axis), NORM_FLOOR)
    return ops.div(dot, ops.mul(na, nb))


def cosine_distance(a, b, axis: int = -1) -> Tensor:
    """1 - cosine similarity, in [0, 2]."""
    return ops.sub(1.0, cosine_similarity(a, b, axis))


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias); ``weight`` is stored (in_features, out_features)."""
    out = ops.matmul(x, weight)
    return out if bias is None else ops.add(out, bias)


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` against ``logits`` (B, C)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {b} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"cross_entropy: label outside [0, {c})")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    nll = ops.neg(ops.sum(ops.mul(ops.log_softmax(logits, axis=-1), onehot), axis=-1))
    if reduction == "sum":
        return ops.sum(nll)
    if reduction == "mean":
        return ops.mean(nll)
    if reduction == "none":
        return nll
    raise ValueError(f"unknown reduction {reduction!r}")
