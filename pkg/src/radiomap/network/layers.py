"""Layers with explicit forward and backward passes.

Activations are ``(C, N, H, W)`` arrays. Each layer caches what its
backward pass needs during ``forward``; ``backward`` returns the input
gradient and stores parameter gradients in ``self.grads``.
"""
from __future__ import annotations

import numpy as np

from .. import kernels


class MissingCacheError(RuntimeError):
    pass


class Layer:
    kind = "layer"
    trainable = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, c, h, w):
        return c, h, w

    def _buffer(self, name, shape, dtype):
        """Reusable scratch array; large temporaries are costly to reallocate."""
        ws = self.__dict__.setdefault("_workspace", {})
        buf = ws.get(name)
        if buf is None or buf.shape != shape or buf.dtype != dtype:
            buf = ws[name] = np.empty(shape, dtype=dtype)
        return buf

    def _need_cache(self):
        if self._cache is None:
            raise MissingCacheError(f"{self.kind}: backward called before forward")
        return self._cache

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def clear(self):
        self._cache = None


def _init_kernel(rng, shape, fan_in, leak, dtype):
    std = np.sqrt(2.0 / (fan_in * (1.0 + leak**2)))
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv(Layer):
    """Zero-padded 'same' 2-D convolution, stride 1.

    ``params["w"]`` has shape ``(c_out, c_in, k, k)`` and is applied as a
    true convolution: ``y[o, i, j] = b[o] + sum F[o, c, u, v] x[c, i-u, j-v]``
    with ``u, v`` running over ``-k//2 .. k//2``.
    """

    kind = "conv"
    trainable = True

    def __init__(self, c_in, c_out, k=3, rng=None, dtype=np.float64, leak=0.25):
        super().__init__()
        if k % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        rng = np.random.default_rng(rng)
        self.params["w"] = _init_kernel(rng, (c_out, c_in, k, k), k * k * c_in, leak, dtype)
        self.params["b"] = np.zeros(c_out, dtype=dtype)

    def output_shape(self, c, h, w):
        if c != self.c_in:
            raise ValueError(f"conv expects {self.c_in} channels, got {c}")
        return self.c_out, h, w

    def _xcorr(self):
        return self.params["w"][:, :, ::-1, ::-1].reshape(self.c_out, -1)

    def _cols(self, x):
        C, N, H, W = x.shape
        if self.k == 1:
            return x.reshape(C, N * H * W)
        cols = self._buffer("cols", (C * self.k * self.k, N * H * W), x.dtype)
        return kernels.im2col(x, self.k, out=cols)

    def forward(self, x):
        if x.shape[0] != self.c_in:
            raise ValueError(f"conv expects {self.c_in} input channels, got {x.shape[0]}")
        x = np.ascontiguousarray(x)
        _, N, H, W = x.shape
        cols = self._cols(x)
        y = self._xcorr() @ cols
        y += self.params["b"][:, None]
        self._cache = (cols, x.shape)
        return y.reshape(self.c_out, N, H, W)

    def backward(self, dy):
        cols, shape = self._need_cache()
        dy2 = np.ascontiguousarray(dy).reshape(self.c_out, -1)
        dwx = dy2 @ cols.T
        self.grads["w"] = dwx.reshape(self.params["w"].shape)[:, :, ::-1, ::-1].copy()
        self.grads["b"] = dy2.sum(axis=1)
        if self.k == 1:
            return (self._xcorr().T @ dy2).reshape(shape)
        dcols = self._buffer("dcols", cols.shape, dy2.dtype)
        np.matmul(self._xcorr().T, dy2, out=dcols)
        return kernels.col2im(dcols, shape, self.k)


class ConvTranspose(Layer):
    """Exact adjoint of :class:`Conv` (same padding) plus a bias.

    ``params["w"]`` has shape ``(c_in, c_out, k, k)``: it is the kernel of
    the forward convolution mapping ``c_out -> c_in`` whose adjoint this
    layer applies.
    """

    kind = "conv_transpose"
    trainable = True

    def __init__(self, c_in, c_out, k=3, rng=None, dtype=np.float64, leak=0.25):
        super().__init__()
        if k % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        rng = np.random.default_rng(rng)
        self.params["w"] = _init_kernel(rng, (c_in, c_out, k, k), k * k * c_in, leak, dtype)
        self.params["b"] = np.zeros(c_out, dtype=dtype)

    def output_shape(self, c, h, w):
        if c != self.c_in:
            raise ValueError(f"conv_transpose expects {self.c_in} channels, got {c}")
        return self.c_out, h, w

    def _mat(self):
        # xcorr matrix of the underlying conv c_out -> c_in
        return self.params["w"][:, :, ::-1, ::-1].reshape(self.c_in, -1)

    def forward(self, x):
        if x.shape[0] != self.c_in:
            raise ValueError(f"conv_transpose expects {self.c_in} input channels, got {x.shape[0]}")
        x = np.ascontiguousarray(x)
        _, N, H, W = x.shape
        x2 = x.reshape(self.c_in, -1)
        out_shape = (self.c_out, N, H, W)
        if self.k == 1:
            y = (self._mat().T @ x2).reshape(out_shape)
        else:
            z = self._buffer("z", (self.c_out * self.k * self.k, x2.shape[1]), x.dtype)
            np.matmul(self._mat().T, x2, out=z)
            y = kernels.col2im(z, out_shape, self.k)
        y += self.params["b"][:, None, None, None]
        self._cache = (x2, x.shape)
        return y

    def backward(self, dy):
        x2, shape = self._need_cache()
        dy = np.ascontiguousarray(dy)
        C, N, H, W = dy.shape
        if self.k == 1:
            dz = dy.reshape(C, -1)
        else:
            dz = kernels.im2col(dy, self.k, out=self._buffer("z", (C * self.k * self.k, N * H * W), dy.dtype))
        dm = x2 @ dz.T
        self.grads["w"] = dm.reshape(self.params["w"].shape)[:, :, ::-1, ::-1].copy()
        self.grads["b"] = dy.sum(axis=(1, 2, 3))
        return (self._mat() @ dz).reshape(shape)


class AvgPool(Layer):
    """2x2 average pooling, stride 2."""

    kind = "avg_pool"

    def output_shape(self, c, h, w):
        if h % 2 or w % 2:
            raise ValueError(f"average pooling needs even spatial dims, got {h}x{w}")
        return c, h // 2, w // 2

    def forward(self, x):
        self._cache = x.shape
        return kernels.avgpool2(np.ascontiguousarray(x))

    def backward(self, dy):
        self._need_cache()
        return kernels.avgpool2_backward(np.ascontiguousarray(dy))


class Upsample(Layer):
    """Factor-2 bilinear upsampling with aligned corners."""

    kind = "bilinear_upsample"

    def output_shape(self, c, h, w):
        return c, 2 * h, 2 * w

    def forward(self, x):
        self._cache = x.shape
        return kernels.upsample2(np.ascontiguousarray(x))

    def backward(self, dy):
        self._need_cache()
        return kernels.upsample2_backward(np.ascontiguousarray(dy))


class PReLU(Layer):
    """Leaky ReLU with one trainable leak per channel."""

    kind = "prelu"
    trainable = True

    def __init__(self, channels, init=0.25, dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.params["a"] = np.full(channels, init, dtype=dtype)

    def forward(self, x):
        x = np.ascontiguousarray(x)
        self._cache = x
        return kernels.prelu(x, self.params["a"])

    def backward(self, dy):
        x = self._need_cache()
        dx, da = kernels.prelu_backward(np.ascontiguousarray(dy), x, self.params["a"])
        self.grads["a"] = da
        return dx


class LeakyReLU(Layer):
    """Leaky ReLU with a fixed leak."""

    kind = "leaky_relu"

    def __init__(self, channels, leak=0.25, dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.leak = leak
        self._a = np.full(channels, leak, dtype=dtype)

    def forward(self, x):
        x = np.ascontiguousarray(x)
        self._cache = x
        return kernels.prelu(x, self._a.astype(x.dtype, copy=False))

    def backward(self, dy):
        x = self._need_cache()
        dx, _ = kernels.prelu_backward(np.ascontiguousarray(dy), x, self._a.astype(x.dtype, copy=False))
        return dx


class Dense(Layer):
    """Fully connected map between flattened ``(C, H, W)`` feature blocks.

    Only used by the dense-bottleneck network variant.
    """

    kind = "dense"
    trainable = True

    def __init__(self, in_shape, out_shape, rng=None, dtype=np.float64, leak=0.25):
        super().__init__()
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        n_in, n_out = int(np.prod(in_shape)), int(np.prod(out_shape))
        rng = np.random.default_rng(rng)
        self.params["w"] = _init_kernel(rng, (n_out, n_in), n_in, leak, dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)

    def output_shape(self, c, h, w):
        if (c, h, w) != self.in_shape:
            raise ValueError(f"dense layer expects {self.in_shape}, got {(c, h, w)}")
        return self.out_shape

    def forward(self, x):
        C, N, H, W = x.shape
        flat = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(N, -1)
        y = flat @ self.params["w"].T + self.params["b"]
        self._cache = (flat, x.shape)
        c, h, w = self.out_shape
        return np.ascontiguousarray(y.reshape(N, c, h, w).transpose(1, 0, 2, 3))

    def backward(self, dy):
        flat, shape = self._need_cache()
        c, N, h, w = dy.shape
        dflat = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(N, -1)
        self.grads["w"] = dflat.T @ flat
        self.grads["b"] = dflat.sum(axis=0)
        dx = dflat @ self.params["w"]
        C, _, H, W = shape
        return np.ascontiguousarray(dx.reshape(N, C, H, W).transpose(1, 0, 2, 3))


class BEMOutput(Layer):
    """Fixed basis-expansion layer: ``y[f] = sum_b coeffs[b] * beta_b(f)``.

    ``basis_values`` is the ``(B, n_f)`` matrix of basis values. The layer
    has no trainable parameters; its backward pass is the transpose map.
    """

    kind = "bem_output"

    def __init__(self, basis_values):
        super().__init__()
        self.beta = np.asarray(basis_values, dtype=float)

    def output_shape(self, c, h, w):
        if c != self.beta.shape[0]:
            raise ValueError(f"BEM layer expects {self.beta.shape[0]} coefficient channels, got {c}")
        return self.beta.shape[1], h, w

    def forward(self, x):
        if x.shape[0] != self.beta.shape[0]:
            raise ValueError(
                f"BEM layer expects {self.beta.shape[0]} coefficient channels, got {x.shape[0]}"
            )
        self._cache = x.shape
        beta = self.beta.astype(x.dtype, copy=False)
        return np.tensordot(beta, x, axes=(0, 0))

    def backward(self, dy):
        self._need_cache()
        beta = self.beta.astype(dy.dtype, copy=False)
        return np.tensordot(beta, dy, axes=(1, 0))


LAYER_KINDS = {
    cls.kind: cls for cls in (Conv, ConvTranspose, AvgPool, Upsample, PReLU, LeakyReLU, Dense, BEMOutput)
}
