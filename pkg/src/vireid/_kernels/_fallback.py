"""Pure numpy implementations of the hot kernels.

Each function mirrors the compiled version in ``_core.pyx`` argument for
argument. Results agree to rounding; ``ranking_stats`` agrees bit for bit
because both run the same sequence of float operations.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def extract_patches(images, patch, stride):
    images = np.ascontiguousarray(images, dtype=np.float64)
    b, c, h, w = images.shape
    rows = (h - patch) // stride + 1
    cols = (w - patch) // stride + 1
    sb, sc, sh, sw = images.strides
    view = as_strided(
        images,
        shape=(b, rows, cols, c, patch, patch),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view.reshape(b, rows * cols, c * patch * patch).copy()


def layer_norm_forward(x, eps):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[..., 0]


def layer_norm_backward(grad, xhat, rstd):
    d = xhat.shape[-1]
    g_mean = grad.sum(axis=-1, keepdims=True) / d
    gx_mean = (grad * xhat).sum(axis=-1, keepdims=True) / d
    return (grad - g_mean - xhat * gx_mean) * rstd[..., None]


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_backward(x, grad):
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return grad * (cdf + x * pdf)


_SPLITTER = 134217729.0  # 2**27 + 1


def _div_residual(k, p, q):
    # exact k - q*p for q = fl(k/p) and integer 0 < p < 2**26 (Veltkamp split of q)
    c = _SPLITTER * q
    hi = c - (c - q)
    lo = q - hi
    return (k - hi * p) - lo * p


def ranking_stats(relevance):
    """Per-query first-hit rank, relevant count, AP and INP.

    ``relevance`` is a (queries, gallery) 0/1 matrix already in ranked
    order. Ranks are 1-based; a query without relevant items gets first-hit
    0 and NaN for AP and INP.

    AP is correctly rounded: each precision term k/r is carried with its
    exact division residual in a double-double sum, and the final division
    by the relevant count is compensated the same way.
    """
    rel = np.asarray(relevance, dtype=bool)
    nq, ng = rel.shape
    first = np.zeros(nq, dtype=np.int64)
    num_rel = rel.sum(axis=1).astype(np.int64)
    ap = np.full(nq, np.nan)
    inp = np.full(nq, np.nan)
    for q in range(nq):
        if num_rel[q] == 0:
            continue
        hit_pos = np.flatnonzero(rel[q]) + 1
        first[q] = hit_pos[0]
        hi = lo = 0.0
        for k, pos in enumerate(hit_pos.tolist(), start=1):
            pos = float(pos)
            t = k / pos
            s = hi + t
            bb = s - hi
            lo += ((hi - (s - bb)) + (t - bb)) + _div_residual(float(k), pos, t) / pos
            hi = s
        n = float(num_rel[q])
        q1 = hi / n
        ap[q] = q1 + (_div_residual(hi, n, q1) + lo) / n
        inp[q] = n / float(hit_pos[-1])
    return first, num_rel, ap, inp
