# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled layer kernels; same contracts as ``_kernels_py``."""
import numpy as np
from cython cimport floating
from libc.string cimport memcpy, memset

BACKEND = "cython"


def im2col(floating[:, :, :, ::1] x, int k, out=None):
    cdef Py_ssize_t C = x.shape[0], N = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t p = k // 2
    if out is None:
        out = np.empty((C * k * k, N * H * W), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] o = out
    cdef Py_ssize_t c, a, b, n, i, si, row, j0, j1
    cdef floating* dst
    cdef floating* src
    cdef size_t fsz = sizeof(floating)
    if C * N * H * W == 0:
        return out
    with nogil:
        for c in range(C):
            for a in range(k):
                for b in range(k):
                    row = (c * k + a) * k + b
                    j0 = p - b if p > b else 0
                    j1 = W + p - b if b > p else W
                    if j1 < j0:
                        j1 = j0
                    dst = &o[row, 0]
                    for n in range(N):
                        for i in range(H):
                            si = i + a - p
                            if si < 0 or si >= H or j1 == j0:
                                memset(dst, 0, W * fsz)
                            else:
                                src = &x[c, n, si, 0]
                                if j0 > 0:
                                    memset(dst, 0, j0 * fsz)
                                memcpy(dst + j0, src + j0 + b - p, (j1 - j0) * fsz)
                                if j1 < W:
                                    memset(dst + j1, 0, (W - j1) * fsz)
                            dst += W
    return out


def col2im(floating[:, ::1] cols, shape, int k, out=None):
    cdef Py_ssize_t C = shape[0], N = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t p = k // 2
    if out is None:
        out = np.zeros((C, N, H, W), dtype=np.asarray(cols).dtype)
    else:
        out[...] = 0
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t c, a, b, n, i, j, si, row, j0, j1, off
    cdef floating* src
    cdef floating* dst
    if C * N * H * W == 0:
        return out
    with nogil:
        for c in range(C):
            for a in range(k):
                for b in range(k):
                    row = (c * k + a) * k + b
                    j0 = p - b if p > b else 0
                    j1 = W + p - b if b > p else W
                    off = b - p
                    src = &cols[row, 0]
                    for n in range(N):
                        for i in range(H):
                            si = i + a - p
                            if si >= 0 and si < H:
                                dst = &o[c, n, si, 0]
                                for j in range(j0, j1):
                                    dst[j + off] += src[j]
                            src += W
    return out


def avgpool2(floating[:, :, :, ::1] x):
    cdef Py_ssize_t C = x.shape[0], N = x.shape[1], H = x.shape[2], W = x.shape[3]
    if H % 2 or W % 2:
        raise ValueError(f"average pooling needs even spatial dims, got {H}x{W}")
    out = np.empty((C, N, H // 2, W // 2), dtype=np.asarray(x).dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t c, n, i, j
    with nogil:
        for c in range(C):
            for n in range(N):
                for i in range(H // 2):
                    for j in range(W // 2):
                        o[c, n, i, j] = 0.25 * (
                            x[c, n, 2 * i, 2 * j] + x[c, n, 2 * i, 2 * j + 1]
                            + x[c, n, 2 * i + 1, 2 * j] + x[c, n, 2 * i + 1, 2 * j + 1]
                        )
    return out


def avgpool2_backward(floating[:, :, :, ::1] dy):
    cdef Py_ssize_t C = dy.shape[0], N = dy.shape[1], h = dy.shape[2], w = dy.shape[3]
    out = np.empty((C, N, 2 * h, 2 * w), dtype=np.asarray(dy).dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t c, n, i, j
    cdef floating g
    with nogil:
        for c in range(C):
            for n in range(N):
                for i in range(h):
                    for j in range(w):
                        g = 0.25 * dy[c, n, i, j]
                        o[c, n, 2 * i, 2 * j] = g
                        o[c, n, 2 * i, 2 * j + 1] = g
                        o[c, n, 2 * i + 1, 2 * j] = g
                        o[c, n, 2 * i + 1, 2 * j + 1] = g
    return out


def _taps(Py_ssize_t n):
    """Align-corners source indices and weights for upsampling ``n -> 2n``."""
    cdef Py_ssize_t m = 2 * n
    s = np.arange(m) * ((<double>(n - 1)) / (m - 1) if n > 1 else 0.0)
    i0 = np.minimum(np.floor(s).astype(np.intp), max(n - 2, 0))
    w = s - i0
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, w


def upsample2(floating[:, :, :, ::1] x):
    cdef Py_ssize_t C = x.shape[0], N = x.shape[1], H = x.shape[2], W = x.shape[3]
    dtype = np.asarray(x).dtype
    hi0, hi1, hw = _taps(H)
    wi0, wi1, ww = _taps(W)
    cdef Py_ssize_t[::1] a0 = hi0, a1 = hi1, b0 = wi0, b1 = wi1
    cdef floating[::1] aw = hw.astype(dtype), bw = ww.astype(dtype)
    out = np.empty((C, N, 2 * H, 2 * W), dtype=dtype)
    rows_arr = np.empty((H, 2 * W), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef floating[:, ::1] rows = rows_arr
    cdef Py_ssize_t c, n, i, j
    cdef floating t
    with nogil:
        for c in range(C):
            for n in range(N):
                # width pass into scratch rows, then height pass on contiguous rows
                for i in range(H):
                    for j in range(2 * W):
                        t = bw[j]
                        rows[i, j] = (1 - t) * x[c, n, i, b0[j]] + t * x[c, n, i, b1[j]]
                for i in range(2 * H):
                    t = aw[i]
                    for j in range(2 * W):
                        o[c, n, i, j] = (1 - t) * rows[a0[i], j] + t * rows[a1[i], j]
    return out


def upsample2_backward(floating[:, :, :, ::1] dy):
    cdef Py_ssize_t C = dy.shape[0], N = dy.shape[1]
    cdef Py_ssize_t H = dy.shape[2] // 2, W = dy.shape[3] // 2
    dtype = np.asarray(dy).dtype
    hi0, hi1, hw = _taps(H)
    wi0, wi1, ww = _taps(W)
    cdef Py_ssize_t[::1] a0 = hi0, a1 = hi1, b0 = wi0, b1 = wi1
    cdef floating[::1] aw = hw.astype(dtype), bw = ww.astype(dtype)
    out = np.zeros((C, N, H, W), dtype=dtype)
    rows_arr = np.empty((H, 2 * W), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef floating[:, ::1] rows = rows_arr
    cdef Py_ssize_t c, n, i, j
    cdef floating t, g
    with nogil:
        for c in range(C):
            for n in range(N):
                rows[:, :] = 0
                for i in range(2 * H):
                    t = aw[i]
                    for j in range(2 * W):
                        g = dy[c, n, i, j]
                        rows[a0[i], j] += (1 - t) * g
                        rows[a1[i], j] += t * g
                for i in range(H):
                    for j in range(2 * W):
                        t = bw[j]
                        g = rows[i, j]
                        o[c, n, i, b0[j]] += (1 - t) * g
                        o[c, n, i, b1[j]] += t * g
    return out


def prelu(floating[:, :, :, ::1] x, a):
    cdef Py_ssize_t C = x.shape[0], M = x.shape[1] * x.shape[2] * x.shape[3]
    dtype = np.asarray(x).dtype
    cdef floating[::1] leak = np.ascontiguousarray(a, dtype=dtype)
    out = np.empty_like(np.asarray(x))
    cdef floating[:, ::1] o = out.reshape(C, M)
    cdef floating[:, ::1] xv = np.asarray(x).reshape(C, M)
    cdef Py_ssize_t c, m
    cdef floating v, s
    with nogil:
        for c in range(C):
            s = leak[c]
            for m in range(M):
                v = xv[c, m]
                o[c, m] = v if v > 0 else s * v
    return out


def prelu_backward(floating[:, :, :, ::1] dy, floating[:, :, :, ::1] x, a):
    cdef Py_ssize_t C = x.shape[0], M = x.shape[1] * x.shape[2] * x.shape[3]
    dtype = np.asarray(x).dtype
    cdef floating[::1] leak = np.ascontiguousarray(a, dtype=dtype)
    dx = np.empty_like(np.asarray(x))
    da = np.zeros(C, dtype=dtype)
    cdef floating[:, ::1] o = dx.reshape(C, M)
    cdef floating[::1] dav = da
    cdef floating[:, ::1] xv = np.asarray(x).reshape(C, M)
    cdef floating[:, ::1] gv = np.asarray(dy).reshape(C, M)
    cdef Py_ssize_t c, m
    cdef floating v, g, s
    cdef double acc
    with nogil:
        for c in range(C):
            s = leak[c]
            acc = 0
            for m in range(M):
                v = xv[c, m]
                g = gv[c, m]
                if v > 0:
                    o[c, m] = g
                else:
                    o[c, m] = s * g
                    acc += v * g
            dav[c] = acc
    return dx, da
