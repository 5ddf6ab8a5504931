"""Completion autoencoder built from a :class:`NetworkSpec`.

Input tensor channels are the value slices (dB) followed by the mask
channels. Values are normalised as ``mask * (v - offset) / scale`` before
the first layer and outputs are mapped back with ``offset + scale * out``;
both constants are fixed (not trained) and stored in the :class:`NetworkSpec`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..grid import GridSpec, MapTensor, SampledMap
from ..propagation import BasisSet
from .layers import (
    AvgPool,
    BEMOutput,
    Conv,
    ConvTranspose,
    Dense,
    LeakyReLU,
    PReLU,
    Upsample,
)

LN10_OVER_10 = math.log(10.0) / 10.0
_COEF_DB_CLIP = 300.0


@dataclass
class NetworkSpec:
    """Layer layout of the completion autoencoder.

    Encoder: ``n_pools`` stages of ``convs_per_stage`` 3x3 convolutions
    (each followed by the activation) and a 2x2 average pool, then a 1x1
    convolution to ``bottleneck_channels`` (the code). The decoder mirrors
    it with a 1x1 transposed convolution, and per stage a bilinear
    upsample followed by ``convs_per_stage`` 3x3 transposed convolutions;
    the very last one is linear and emits the output channels.
    """

    n_y: int = 32
    n_x: int = 32
    value_channels: int = 1
    mask_channels: int = 1
    filters: int | list[int] = 32
    n_pools: int = 4
    convs_per_stage: int = 3
    bottleneck_channels: int = 16
    kernel_size: int = 3
    activation: str = "prelu"
    leak: float = 0.25
    out_channels: int | None = None
    basis: dict | None = None
    dense_bottleneck: bool = False
    dense_code_length: int | None = None
    freq_separated: bool = False
    input_offset: float | None = None
    input_scale: float | None = None

    def __post_init__(self):
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.activation not in ("prelu", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        f = 2**self.n_pools
        if self.n_y % f or self.n_x % f:
            raise ValueError(
                f"grid {self.n_y}x{self.n_x} is not divisible by 2**n_pools = {f}; "
                "spatial dims must halve exactly at each pool"
            )
        if isinstance(self.filters, int):
            self.filters = [self.filters] * self.n_pools
        self.filters = [int(x) for x in self.filters]
        if len(self.filters) != self.n_pools:
            raise ValueError("need one filter count per pooling stage")
        if self.convs_per_stage < 1:
            raise ValueError("convs_per_stage must be >= 1")
        if self.dense_bottleneck and not self.dense_code_length:
            raise ValueError("dense bottleneck needs dense_code_length")
        if self.out_channels is None:
            self.out_channels = self.value_channels

    @property
    def in_channels(self) -> int:
        return self.value_channels + self.mask_channels

    @property
    def bottleneck_shape(self) -> tuple[int, int, int]:
        """(H_b, W_b, C_b) of the code block."""
        if self.dense_bottleneck:
            return 1, 1, int(self.dense_code_length)
        f = 2**self.n_pools
        return self.n_y // f, self.n_x // f, self.bottleneck_channels

    @property
    def code_length(self) -> int:
        h, w, c = self.bottleneck_shape
        return h * w * c

    @property
    def depth(self) -> int:
        """Number of trainable conv / transposed-conv / dense layers."""
        return 2 * (self.n_pools * self.convs_per_stage + 1)

    @property
    def basis_set(self) -> BasisSet | None:
        return BasisSet.from_dict(self.basis) if self.basis else None

    @property
    def trunk_out_channels(self) -> int:
        return self.basis_set.size if self.basis else self.out_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def flagship(cls, n: int = 32, **kw) -> "NetworkSpec":
        """32x32, 4 pools, 3 convs per stage (L = 26), code length 64."""
        kw.setdefault("n_pools", 4)
        kw.setdefault("convs_per_stage", 3)
        kw.setdefault("bottleneck_channels", 16)
        return cls(n_y=n, n_x=n, **kw)

    @classmethod
    def toy(cls, n: int = 16, code_length: int = 4, **kw) -> "NetworkSpec":
        """Free-space toy net: 4 pools down to a 1x1 code of ``code_length`` channels."""
        kw.setdefault("convs_per_stage", 2)
        kw.setdefault("filters", 16)
        return cls(n_y=n, n_x=n, n_pools=4, bottleneck_channels=code_length, **kw)


class CompletionAutoencoder:
    """Encoder/decoder network with explicit backpropagation."""

    def __init__(self, spec: NetworkSpec, seed=0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers, self.code_index = self._build(rng)
        basis = spec.basis_set
        self.bem = BEMOutput(basis.values) if basis is not None else None
        self._out_cache = None

    # ------------------------------------------------------------ building

    def _act(self, channels):
        if self.spec.activation == "prelu":
            return PReLU(channels, self.spec.leak, self.dtype)
        return LeakyReLU(channels, self.spec.leak, self.dtype)

    def _build(self, rng):
        s = self.spec
        k, dt, leak = s.kernel_size, self.dtype, s.leak
        layers = []
        c = s.in_channels
        for stage in range(s.n_pools):
            for _ in range(s.convs_per_stage):
                layers += [Conv(c, s.filters[stage], k, rng, dt, leak), self._act(s.filters[stage])]
                c = s.filters[stage]
            layers.append(AvgPool())
        f = 2**s.n_pools
        hb, wb = s.n_y // f, s.n_x // f
        if s.dense_bottleneck:
            layers.append(Dense((c, hb, wb), (s.dense_code_length, 1, 1), rng, dt, leak))
        else:
            layers.append(Conv(c, s.bottleneck_channels, 1, rng, dt, leak))
        code_index = len(layers)
        top = s.filters[-1]
        if s.dense_bottleneck:
            layers.append(Dense((s.dense_code_length, 1, 1), (top, hb, wb), rng, dt, leak))
        else:
            layers.append(ConvTranspose(s.bottleneck_channels, top, 1, rng, dt, leak))
        layers.append(self._act(top))
        c = top
        for stage in reversed(range(s.n_pools)):
            layers.append(Upsample())
            for r in range(s.convs_per_stage):
                last = stage == 0 and r == s.convs_per_stage - 1
                c_out = s.trunk_out_channels if last else s.filters[stage]
                layers.append(ConvTranspose(c, c_out, k, rng, dt, leak))
                if not last:
                    layers.append(self._act(c_out))
                c = c_out
        return layers, code_index

    # ------------------------------------------------------------ params

    def parameters(self):
        """``(layer_index, name, array)`` for every trainable tensor."""
        return [
            (i, name, arr)
            for i, layer in enumerate(self.layers)
            for name, arr in layer.params.items()
        ]

    def gradients(self):
        return [layer.grads[name] for i, layer in enumerate(self.layers) for name in layer.params]

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def copy_weights(self) -> list[np.ndarray]:
        return [p.copy() for _, _, p in self.parameters()]

    def set_weights(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} tensors, got {len(arrays)}")
        for (i, name, p), a in zip(params, arrays):
            if a.shape != p.shape:
                raise ValueError(f"layer {i} {name}: shape {a.shape} != {p.shape}")
            self.layers[i].params[name] = np.asarray(a, dtype=self.dtype).copy()

    # ------------------------------------------------------------ inputs

    @property
    def offset(self) -> float:
        return 0.0 if self.spec.input_offset is None else float(self.spec.input_offset)

    @property
    def scale(self) -> float:
        return 1.0 if self.spec.input_scale is None else float(self.spec.input_scale)

    def make_input(self, values, masks) -> np.ndarray:
        """Network input ``(C_in, N, H, W)`` from values ``(N, H, W, n_v)`` (dB)
        and masks ``(N, H, W, n_m)``; the first mask marks observed cells."""
        values = np.asarray(values, dtype=float)
        masks = np.asarray(masks, dtype=float)
        observed = (masks[..., :1] == 1).astype(float)
        norm = observed * (values - self.offset) / self.scale
        x = np.concatenate([norm, masks], axis=-1)
        if x.shape[-1] != self.spec.in_channels:
            raise ValueError(
                f"input has {x.shape[-1]} channels, network expects {self.spec.in_channels}"
            )
        if x.shape[1:3] != (self.spec.n_y, self.spec.n_x):
            raise ValueError(
                f"input grid {x.shape[1:3]} does not match network grid "
                f"{(self.spec.n_y, self.spec.n_x)}"
            )
        return np.ascontiguousarray(x.transpose(3, 0, 1, 2), dtype=self.dtype)

    def sampled_to_arrays(self, sampled: SampledMap):
        """Per-instance values and masks for one sampled map (split per frequency
        when the network is frequency separated)."""
        masks = sampled.mask_channels()
        if self.spec.freq_separated:
            vals = sampled.values.transpose(2, 0, 1)[..., None]
            return vals, np.broadcast_to(masks, (sampled.n_f,) + masks.shape)
        return sampled.values[None], masks[None]

    # ------------------------------------------------------------ passes

    def _run(self, layers, x):
        for layer in layers:
            x = layer.forward(x)
        return x

    def _head(self, out):
        """Map trunk output to dB predictions (with BEM head if present)."""
        if self.bem is None:
            self._out_cache = None
            return self.offset + self.scale * out
        coef_db = np.clip(self.offset + self.scale * out, -_COEF_DB_CLIP, _COEF_DB_CLIP)
        coef = np.exp(LN10_OVER_10 * coef_db)
        psd = self.bem.forward(coef)
        psd = np.maximum(psd, np.finfo(psd.dtype).tiny)
        self._out_cache = (coef, psd)
        return np.log(psd) / LN10_OVER_10

    def _head_backward(self, dpred):
        if self.bem is None:
            return self.scale * dpred
        coef, psd = self._out_cache
        dpsd = dpred / (LN10_OVER_10 * psd)
        dcoef = self.bem.backward(dpsd)
        return self.scale * LN10_OVER_10 * coef * dcoef

    def forward(self, x):
        """Forward pass on ``(C_in, N, H, W)``; returns dB predictions ``(C_out, N, H, W)``."""
        return self._head(self._run(self.layers, x))

    def backward(self, dpred):
        """Backpropagate ``dLoss/dprediction``; returns the input gradient."""
        g = self._head_backward(dpred)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def encode_batch(self, x) -> np.ndarray:
        z = self._run(self.layers[: self.code_index], x)
        return np.ascontiguousarray(z.transpose(1, 2, 3, 0)).reshape(z.shape[1], -1)

    def decode_batch(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=self.dtype)
        if codes.ndim == 1:
            codes = codes[None]
        hb, wb, cb = self.spec.bottleneck_shape
        if codes.shape[1] != hb * wb * cb:
            raise ValueError(f"code length {codes.shape[1]} != {hb * wb * cb}")
        z = np.ascontiguousarray(codes.reshape(-1, hb, wb, cb).transpose(3, 0, 1, 2))
        return self._head(self._run(self.layers[self.code_index :], z))

    def coefficients(self, x) -> np.ndarray:
        """Estimated linear BEM coefficients ``(N, H, W, B)``."""
        if self.bem is None:
            raise ValueError("network has no BEM output layer")
        self.forward(x)
        return self._out_cache[0].transpose(1, 2, 3, 0).astype(float)

    def predict(self, values, masks, batch_size: int = 256) -> np.ndarray:
        """dB predictions ``(N, H, W, C_out)`` for stacked instances."""
        out = []
        for s in range(0, len(values), batch_size):
            x = self.make_input(values[s : s + batch_size], masks[s : s + batch_size])
            out.append(self.forward(x).transpose(1, 2, 3, 0).astype(float))
        return np.concatenate(out, axis=0)

    # ------------------------------------------------------------ map-level API

    def _check_grid(self, grid: GridSpec):
        if grid.shape != (self.spec.n_y, self.spec.n_x):
            raise ValueError(
                f"sampled map grid {grid.shape} does not match network grid "
                f"{(self.spec.n_y, self.spec.n_x)}"
            )

    def _assemble(self, sampled: SampledMap, pred) -> MapTensor:
        if self.spec.freq_separated:
            vals = pred[..., 0].transpose(1, 2, 0)
        else:
            vals = pred[0]
        return MapTensor(sampled.grid, vals, self._out_frequencies(sampled, vals.shape[-1]))

    def _out_frequencies(self, sampled, n_f):
        if len(sampled.frequencies) == n_f:
            return sampled.frequencies
        return self.spec.basis_set.frequencies

    def estimate(self, sampled: SampledMap) -> MapTensor:
        self._check_grid(sampled.grid)
        vals, masks = self.sampled_to_arrays(sampled)
        return self._assemble(sampled, self.predict(vals, masks))

    def encode(self, sampled: SampledMap) -> np.ndarray:
        """Code vector; frequency-separated nets return one code per slice, concatenated."""
        self._check_grid(sampled.grid)
        vals, masks = self.sampled_to_arrays(sampled)
        return self.encode_batch(self.make_input(vals, masks)).reshape(-1).astype(float)

    def decode(self, code, grid: GridSpec, frequencies=None) -> MapTensor:
        code = np.asarray(code, dtype=float).reshape(-1, self.spec.code_length)
        pred = self.decode_batch(code).transpose(1, 2, 3, 0).astype(float)
        vals = pred[..., 0].transpose(1, 2, 0) if self.spec.freq_separated else pred[0]
        if frequencies is None:
            basis = self.spec.basis_set
            frequencies = basis.frequencies if basis is not None else np.zeros(vals.shape[-1])
        return MapTensor(grid, vals, frequencies)
