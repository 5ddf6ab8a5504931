"""Losses, the Adam optimiser and the training loop.

Training instances are addressed as ``(record, sub)`` pairs so that the
sample-split and frequency-separated regimes never materialise their
expanded datasets: the per-instance input and target are built when the
batch is assembled.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import CompletionAutoencoder, NetworkSpec

log = logging.getLogger(__name__)

LOSS_MODES = ("masked_self", "freq_separated", "synthetic_target", "sample_split")


class TrainingError(RuntimeError):
    pass


class EmptyObservationWarning(RuntimeWarning):
    pass


def masked_loss(prediction, target, omega, return_grad=False):
    """Squared error over observed cells, normalised by ``|omega| * n_f``.

    ``prediction`` and ``target`` are ``(..., H, W, n_f)`` in dB, ``omega``
    is a boolean ``(..., H, W)`` mask. Leading axes are treated as a batch
    and the per-instance losses are averaged. An instance with empty
    ``omega`` contributes 0 and triggers :class:`EmptyObservationWarning`.
    """
    prediction = np.asarray(prediction, dtype=float)
    target = np.asarray(target, dtype=float)
    if prediction.shape != target.shape:
        raise ValueError(f"prediction {prediction.shape} and target {target.shape} differ")
    omega = np.asarray(omega).astype(bool)
    if omega.shape != prediction.shape[:-1]:
        raise ValueError(f"mask shape {omega.shape} does not match map shape {prediction.shape[:-1]}")
    n_f = prediction.shape[-1]
    count = omega.sum(axis=(-2, -1)) * n_f
    if np.any(count == 0):
        warnings.warn("empty observation set; its loss is 0", EmptyObservationWarning, stacklevel=2)
    denom = np.where(count > 0, count, 1)
    diff = np.where(omega[..., None], prediction - target, 0.0)
    per = (diff**2).sum(axis=(-3, -2, -1)) / denom
    n_inst = per.size
    loss = float(per.mean())
    if not return_grad:
        return loss
    grad = 2.0 * diff / (np.asarray(denom)[..., None, None, None] * n_inst)
    return loss, grad


def frobenius_loss(prediction, target):
    """Plain mean squared error over all entries."""
    d = np.asarray(prediction, float) - np.asarray(target, float)
    return float(np.mean(d**2))


def split_observations(omega_flat, n_input, rng):
    """Random disjoint split of observed cell indices into input and output halves."""
    perm = rng.permutation(omega_flat)
    return np.sort(perm[:n_input]), np.sort(perm[n_input:])


class Adam:
    """Adam optimiser updating a list of arrays in place."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        step = self.lr * np.sqrt(c2) / c1
        eps = self.eps * np.sqrt(c2)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= step * m / (np.sqrt(v) + eps)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    iterations: int = 1000
    seed: int = 0
    loss: str = "synthetic_target"
    q_t: int = 10
    split: float = 0.5
    pretrained: str | None = None
    dtype: str = "float32"
    log_every: int = 0

    def __post_init__(self):
        self.loss = self.loss.replace("-", "_")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss!r}; choose from {LOSS_MODES}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iteration count must be >= 0")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split fraction must lie in (0, 1)")
        if self.q_t < 1:
            raise ValueError("q_t must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class TrainingSet:
    """Stacked training records and the instance expansion of a loss mode.

    Parameters
    ----------
    records : iterable of DatasetRecord
    mode : str
        One of ``LOSS_MODES``.
    q_t, split : sample-split parameters.
    seed : int
        Seeds the sample-split draws; instance ``(t, q)`` always gets the
        same split.
    """

    def __init__(self, records, mode="synthetic_target", q_t=10, split=0.5, seed=0):
        records = list(records)
        if not records:
            raise ValueError("no training records")
        self.mode = mode
        self.q_t, self.split, self.seed = q_t, split, seed
        s0 = records[0].sampled
        self.grid = s0.grid
        self.values = np.stack([r.sampled.values for r in records]).astype(np.float32)
        self.masks = np.stack([r.sampled.mask_channels() for r in records]).astype(np.float32)
        self.observed = np.stack([r.sampled.sample_mask == 1 for r in records])
        self.buildings = self.masks[..., 0] == -1
        if mode == "synthetic_target":
            self.truth = np.stack([r.true_map.values for r in records]).astype(np.float32)
            if self.truth.shape != self.values.shape:
                raise ValueError("true and sampled maps differ in shape")
        else:
            self.truth = None
        self.n_records = len(records)
        self.n_f = self.values.shape[-1]
        if mode == "sample_split":
            self.n_sub = q_t
        elif mode == "freq_separated":
            self.n_sub = self.n_f
        else:
            self.n_sub = 1

    def __len__(self):
        return self.n_records * self.n_sub

    @property
    def value_channels(self):
        return 1 if self.mode == "freq_separated" else self.n_f

    def input_statistics(self):
        """Mean and standard deviation of observed input values (dB)."""
        v = self.values[self.observed]
        if v.size == 0:
            return 0.0, 1.0
        return float(v.mean(dtype=np.float64)), float(v.std(dtype=np.float64))

    def _split_masks(self, t, q):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x5EED, int(t), int(q)]))
        cells = np.flatnonzero(self.observed[t])
        n_in = int(round(self.split * len(cells)))
        inp, out = split_observations(cells, n_in, rng)
        shape = self.observed.shape[1:]
        m_in = np.zeros(int(np.prod(shape)), bool)
        m_out = np.zeros_like(m_in)
        m_in[inp] = True
        m_out[out] = True
        return m_in.reshape(shape), m_out.reshape(shape)

    def batch(self, idx):
        """Input values, masks, targets and target weights for instance indices."""
        idx = np.asarray(idx)
        t, sub = np.divmod(idx, self.n_sub)
        if self.mode == "freq_separated":
            vals = self.values[t, ..., sub][..., None]
            masks = self.masks[t]
            return vals, masks, vals, self.observed[t]
        if self.mode == "synthetic_target":
            return self.values[t], self.masks[t], self.truth[t], np.ones(self.observed[t].shape, bool)
        if self.mode == "masked_self":
            vals = self.values[t]
            return vals, self.masks[t], vals, self.observed[t]
        # sample_split
        vals = self.values[t]
        masks = self.masks[t].copy()
        weight = np.zeros(self.observed[t].shape, bool)
        for n, (tt, q) in enumerate(zip(t, sub)):
            m_in, m_out = self._split_masks(tt, q)
            first = np.where(m_in, 1.0, np.where(self.buildings[tt], -1.0, 0.0))
            masks[n, ..., 0] = first
            weight[n] = m_out
        return vals, masks, vals, weight


@dataclass
class TrainResult:
    model: CompletionAutoencoder
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def train(spec: NetworkSpec, data, cfg: TrainConfig, model: CompletionAutoencoder | None = None,
          callback=None) -> TrainResult:
    """Train a completion autoencoder with Adam.

    ``data`` is a :class:`TrainingSet` or an iterable of dataset records.
    ``model`` (or ``cfg.pretrained``) gives initial weights for hybrid
    training; otherwise weights are initialised from ``cfg.seed``. The
    input normalisation constants are fitted from the data when ``spec``
    does not fix them.
    """
    if not isinstance(data, TrainingSet):
        data = TrainingSet(data, cfg.loss, cfg.q_t, cfg.split, cfg.seed)
    elif data.mode != cfg.loss:
        raise ValueError(f"training set built for {data.mode!r}, config asks for {cfg.loss!r}")
    if model is None and cfg.pretrained:
        from .archive import load_model

        model = load_model(cfg.pretrained, dtype=cfg.dtype)
    if model is not None:
        spec = model.spec
    if spec.value_channels != data.value_channels:
        raise ValueError(
            f"network takes {spec.value_channels} value channels, data provides {data.value_channels}"
        )
    if spec.mask_channels != data.masks.shape[-1]:
        raise ValueError(
            f"network takes {spec.mask_channels} mask channels, data provides {data.masks.shape[-1]}"
        )
    if (spec.n_y, spec.n_x) != data.grid.shape:
        raise ValueError(f"network grid {(spec.n_y, spec.n_x)} != data grid {data.grid.shape}")
    if spec.input_offset is None or spec.input_scale is None:
        mu, sd = data.input_statistics()
        spec.input_offset = mu
        spec.input_scale = max(sd, 1.0)
    if model is None:
        model = CompletionAutoencoder(spec, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    params = [p for _, _, p in model.parameters()]
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA7C]))
    n = len(data)
    bs = min(cfg.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    losses = []
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = np.sort(order[pos : pos + bs])
        pos += bs
        vals, masks, target, weight = data.batch(idx)
        x = model.make_input(vals, masks)
        pred = model.forward(x)
        tgt = np.ascontiguousarray(np.asarray(target).transpose(3, 0, 1, 2), dtype=pred.dtype)
        w = np.asarray(weight, dtype=pred.dtype)
        count = w.sum(axis=(1, 2)) * pred.shape[0]
        if np.any(count == 0):
            warnings.warn("empty observation set in batch; its loss is 0", EmptyObservationWarning)
        denom = np.where(count > 0, count, 1).astype(pred.dtype)
        diff = (pred - tgt) * w[None]
        per = (diff.astype(np.float64) ** 2).sum(axis=(0, 2, 3)) / denom
        loss = float(per.mean())
        if not np.isfinite(loss):
            finite = np.isfinite(pred)
            raise TrainingError(
                f"non-finite loss at iteration {it} (lr={cfg.learning_rate}); "
                f"{(~finite).sum()} non-finite predictions, "
                f"{(~np.isfinite(tgt)).sum()} non-finite targets"
            )
        losses.append(loss)
        grad = diff * (2.0 / (denom * len(idx)))[None, :, None, None]
        model.backward(grad.astype(pred.dtype, copy=False))
        opt.step(model.gradients())
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            log.info("iteration %d loss %.4f", it + 1, np.mean(losses[-cfg.log_every :]))
        if callback is not None:
            callback(it, loss, model)
    return TrainResult(model, losses, time.perf_counter() - t0)


def dataset_loss(model: CompletionAutoencoder, data: TrainingSet, batch_size=256) -> float:
    """Mean loss over all instances of a training set (no parameter update)."""
    total = 0.0
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        vals, masks, target, weight = data.batch(idx)
        pred = model.predict(vals, masks)
        w = np.asarray(weight, bool)
        if np.any(w.sum(axis=(1, 2)) == 0):
            continue
        total += masked_loss(pred, np.asarray(target, float), w) * len(idx)
    return total / len(data)
