# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# wraparound is off: never index Python sequences with negative constants here.
"""Compiled hot kernels. Same signatures and contracts as ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, erf, exp

cnp.import_array()

cdef double SQRT_HALF = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def extract_patches(images, int patch, int stride):
    img = np.ascontiguousarray(images, dtype=np.float64)
    cdef Py_ssize_t b = img.shape[0], c = img.shape[1], h = img.shape[2], w = img.shape[3]
    cdef Py_ssize_t rows = (h - patch) // stride + 1
    cdef Py_ssize_t cols = (w - patch) // stride + 1
    out = np.empty((b, rows * cols, c * patch * patch))
    cdef double[:, :, :, ::1] src = img
    cdef double[:, :, ::1] dst = out
    cdef Py_ssize_t n, i, j, ch, pr, pc, k, top, left
    for n in range(b):
        for i in range(rows):
            top = i * stride
            for j in range(cols):
                left = j * stride
                k = 0
                for ch in range(c):
                    for pr in range(patch):
                        for pc in range(patch):
                            dst[n, i * cols + j, k] = src[n, ch, top + pr, left + pc]
                            k += 1
    return out


def layer_norm_forward(x, double eps):
    shape = x.shape
    last = len(shape) - 1
    x2 = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, shape[last])
    cdef Py_ssize_t r = x2.shape[0], d = x2.shape[1], i, j
    xhat = np.empty((r, d))
    rstd = np.empty(r)
    cdef double[:, ::1] xs = x2
    cdef double[:, ::1] ys = xhat
    cdef double[::1] rs = rstd
    cdef double mean, var, diff, inv
    for i in range(r):
        mean = 0.0
        for j in range(d):
            mean += xs[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            diff = xs[i, j] - mean
            var += diff * diff
        var /= d
        inv = 1.0 / sqrt(var + eps)
        rs[i] = inv
        for j in range(d):
            ys[i, j] = (xs[i, j] - mean) * inv
    return xhat.reshape(shape), rstd.reshape(shape[:last])


def layer_norm_backward(grad, xhat, rstd):
    shape = grad.shape
    last = len(shape) - 1
    g2 = np.ascontiguousarray(grad, dtype=np.float64).reshape(-1, shape[last])
    h2 = np.ascontiguousarray(xhat, dtype=np.float64).reshape(-1, shape[last])
    r1 = np.ascontiguousarray(rstd, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t r = g2.shape[0], d = g2.shape[1], i, j
    out = np.empty((r, d))
    cdef double[:, ::1] gs = g2
    cdef double[:, ::1] hs = h2
    cdef double[::1] rs = r1
    cdef double[:, ::1] os = out
    cdef double gm, ghm
    for i in range(r):
        gm = 0.0
        ghm = 0.0
        for j in range(d):
            gm += gs[i, j]
            ghm += gs[i, j] * hs[i, j]
        gm /= d
        ghm /= d
        for j in range(d):
            os[i, j] = (gs[i, j] - gm - hs[i, j] * ghm) * rs[i]
    return out.reshape(shape)


def gelu_forward(x):
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] xs = flat
    cdef double[::1] ys = out
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double v
    for i in range(n):
        v = xs[i]
        ys[i] = 0.5 * v * (1.0 + erf(v * SQRT_HALF))
    return out.reshape(np.shape(x))


def gelu_backward(x, grad):
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    gflat = np.ascontiguousarray(grad, dtype=np.float64).reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] xs = flat
    cdef double[::1] gs = gflat
    cdef double[::1] ys = out
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double v
    for i in range(n):
        v = xs[i]
        ys[i] = gs[i] * (0.5 * (1.0 + erf(v * SQRT_HALF)) + v * INV_SQRT_2PI * exp(-0.5 * v * v))
    return out.reshape(np.shape(x))


cdef double SPLITTER = 134217729.0  # 2**27 + 1


cdef inline double div_residual(double k, double p, double q):
    # exact k - q*p for q = fl(k/p) and integer 0 < p < 2**26
    cdef double c = SPLITTER * q
    cdef double hi = c - (c - q)
    cdef double lo = q - hi
    return (k - hi * p) - lo * p


def ranking_stats(relevance):
    rel = np.ascontiguousarray(relevance, dtype=np.uint8)
    cdef Py_ssize_t nq = rel.shape[0], ng = rel.shape[1], q, j
    first = np.zeros(nq, dtype=np.int64)
    num_rel = np.zeros(nq, dtype=np.int64)
    ap = np.full(nq, np.nan)
    inp = np.full(nq, np.nan)
    cdef cnp.uint8_t[:, ::1] rs = rel
    cdef cnp.int64_t[::1] fs = first
    cdef cnp.int64_t[::1] ns = num_rel
    cdef double[::1] aps = ap
    cdef double[::1] inps = inp
    cdef cnp.int64_t hits, last
    cdef double hi, lo, t, pos, s, bb, q1, n
    for q in range(nq):
        hits = 0
        last = 0
        hi = 0.0
        lo = 0.0
        for j in range(ng):
            if rs[q, j]:
                hits += 1
                if hits == 1:
                    fs[q] = j + 1
                pos = <double>(j + 1)
                t = <double>hits / pos
                # double-double accumulation of the exact precision terms
                s = hi + t
                bb = s - hi
                lo += ((hi - (s - bb)) + (t - bb)) + div_residual(<double>hits, pos, t) / pos
                hi = s
                last = j + 1
        ns[q] = hits
        if hits > 0:
            n = <double>hits
            q1 = hi / n
            aps[q] = q1 + (div_residual(hi, n, q1) + lo) / n
            inps[q] = n / <double>last
    return first, num_rel, ap, inp
