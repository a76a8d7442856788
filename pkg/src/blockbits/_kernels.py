"""Compiled matrix-product kernels.

Every output entry is accumulated as ``((0 + a0*b0) + a1*b1) + ...`` in
increasing inner index, i.e. the textbook triple loop. No FMA contraction or
reassociation is enabled, so results match a naive Python reference bit for
bit and never depend on thread count or BLAS build.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def _mm_into(a, b, out):
    r, k = a.shape
    c = b.shape[1]
    i = 0
    # eight-row tiles reuse each loaded row of b; summation order is untouched
    while i + 8 <= r:
        o0 = out[i]
        o1 = out[i + 1]
        o2 = out[i + 2]
        o3 = out[i + 3]
        o4 = out[i + 4]
        o5 = out[i + 5]
        o6 = out[i + 6]
        o7 = out[i + 7]
        for kk in range(k):
            a0 = a[i, kk]
            a1 = a[i + 1, kk]
            a2 = a[i + 2, kk]
            a3 = a[i + 3, kk]
            a4 = a[i + 4, kk]
            a5 = a[i + 5, kk]
            a6 = a[i + 6, kk]
            a7 = a[i + 7, kk]
            bk = b[kk]
            for j in range(c):
                bj = bk[j]
                o0[j] += a0 * bj
                o1[j] += a1 * bj
                o2[j] += a2 * bj
                o3[j] += a3 * bj
                o4[j] += a4 * bj
                o5[j] += a5 * bj
                o6[j] += a6 * bj
                o7[j] += a7 * bj
        i += 8
    while i < r:
        oi = out[i]
        for kk in range(k):
            aik = a[i, kk]
            bk = b[kk]
            for j in range(c):
                oi[j] += aik * bk[j]
        i += 1


@numba.njit(cache=True)
def mm2d(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    _mm_into(a, b, out)
    return out


@numba.njit(cache=True)
def mm3d(a, b):
    g = a.shape[0]
    out = np.zeros((g, a.shape[1], b.shape[2]))
    for t in range(g):
        _mm_into(a[t], b[t], out[t])
    return out


def matmul(a, b):
    """Exact-order product of float64 arrays with equal leading batch dims."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim == 2:
        return mm2d(a, b)
    lead = a.shape[:-2]
    a3 = a.reshape((-1,) + a.shape[-2:])
    b3 = b.reshape((-1,) + b.shape[-2:])
    return mm3d(a3, b3).reshape(lead + (a.shape[-2], b.shape[-1]))
