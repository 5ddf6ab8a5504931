"""Pure numpy implementations of the layer kernels.

Activations use the channel-major layout ``(C, N, H, W)`` so that a
convolution becomes a single GEMM against the ``im2col`` matrix of shape
``(C * k * k, N * H * W)``. Every function here has a compiled twin in
``_ckernels`` with the same signature.
"""
from __future__ import annotations

import numpy as np

BACKEND = "python"


def im2col(x, k, out=None):
    """Patch matrix with ``cols[(c*k + a)*k + b, n, i, j] = xpad[c, n, i + a, j + b]``
    for zero padding ``k // 2`` on both spatial sides."""
    C, N, H, W = x.shape
    p = k // 2
    if out is None:
        out = np.empty((C * k * k, N * H * W), dtype=x.dtype)
    view = out.reshape(C, k, k, N, H, W)
    for a in range(k):
        di = a - p
        i0, i1 = max(0, -di), min(H, H - di)
        for b in range(k):
            dj = b - p
            j0, j1 = max(0, -dj), min(W, W - dj)
            dst = view[:, a, b]
            if i0 > 0:
                dst[:, :, :i0] = 0
            if i1 < H:
                dst[:, :, i1:] = 0
            if j0 > 0:
                dst[:, :, :, :j0] = 0
            if j1 < W:
                dst[:, :, :, j1:] = 0
            dst[:, :, i0:i1, j0:j1] = x[:, :, i0 + di : i1 + di, j0 + dj : j1 + dj]
    return out


def col2im(cols, shape, k, out=None):
    """Adjoint of :func:`im2col`: scatter-add patches back to ``(C, N, H, W)``."""
    C, N, H, W = shape
    p = k // 2
    if out is None:
        out = np.zeros(shape, dtype=cols.dtype)
    else:
        out[...] = 0
    view = cols.reshape(C, k, k, N, H, W)
    for a in range(k):
        di = a - p
        i0, i1 = max(0, -di), min(H, H - di)
        for b in range(k):
            dj = b - p
            j0, j1 = max(0, -dj), min(W, W - dj)
            out[:, :, i0 + di : i1 + di, j0 + dj : j1 + dj] += view[:, a, b, :, i0:i1, j0:j1]
    return out


def avgpool2(x):
    C, N, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"average pooling needs even spatial dims, got {H}x{W}")
    return x.reshape(C, N, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(dy):
    C, N, h, w = dy.shape
    dx = np.empty((C, N, h, 2, w, 2), dtype=dy.dtype)
    dx[...] = (0.25 * dy)[:, :, :, None, :, None]
    return dx.reshape(C, N, 2 * h, 2 * w)


def _interp_matrix(n, dtype):
    """Align-corners linear interpolation ``(2n, n)`` matrix."""
    m = 2 * n
    U = np.zeros((m, n), dtype=dtype)
    if n == 1:
        U[:, 0] = 1
        return U
    s = np.arange(m) * (n - 1) / (m - 1)
    i0 = np.minimum(np.floor(s).astype(int), n - 2)
    w = s - i0
    U[np.arange(m), i0] = 1 - w
    U[np.arange(m), i0 + 1] += w
    return U


def upsample2(x):
    _, _, H, W = x.shape
    Uh = _interp_matrix(H, x.dtype)
    Uw = _interp_matrix(W, x.dtype)
    return np.ascontiguousarray(Uh @ x @ Uw.T)


def upsample2_backward(dy):
    _, _, H2, W2 = dy.shape
    Uh = _interp_matrix(H2 // 2, dy.dtype)
    Uw = _interp_matrix(W2 // 2, dy.dtype)
    return np.ascontiguousarray(Uh.T @ dy @ Uw)


def prelu(x, a):
    """Per-channel PReLU; ``a`` has one leak per channel (axis 0)."""
    return np.where(x > 0, x, a[:, None, None, None] * x)


def prelu_backward(dy, x, a):
    neg = x <= 0
    dx = np.where(neg, a[:, None, None, None] * dy, dy)
    da = (np.where(neg, x, 0) * dy).sum(axis=(1, 2, 3))
    return dx, da
