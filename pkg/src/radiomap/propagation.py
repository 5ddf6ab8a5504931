"""Synthetic radio map generation and ingestion of external map files.

Units: positions in meters, frequencies in Hz, basis functions in 1/MHz,
powers in dBm (linear mW), PSDs in dBm/MHz.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import rmt
from .grid import (
    GridSpec,
    MapTensor,
    SampledMap,
    smooth_map,
    to_db,
    to_linear,
)

MIN_DISTANCE = 0.1
MHZ = 1e6

FREE_SPACE = "free_space_like"
PATHLOSS_ONLY = "pathloss_only"
PATHLOSS_SHADOWING = "pathloss_plus_shadowing"
_MODES = (FREE_SPACE, PATHLOSS_ONLY, PATHLOSS_SHADOWING)


@dataclass
class SourceConfig:
    position: tuple[float, float]
    powers_dbm: tuple[float, ...]
    height: float = 1.5

    def __post_init__(self):
        self.position = (float(self.position[0]), float(self.position[1]))
        self.powers_dbm = tuple(float(p) for p in np.atleast_1d(self.powers_dbm))
        if not all(math.isfinite(p) for p in self.powers_dbm):
            raise ValueError("source powers must be finite")


@dataclass
class ChannelModel:
    pathloss_exponent: float = 3.0
    unit_distance_gain: float = -30.0
    shadowing_variance: float = 10.0
    shadowing_decay: float = 0.95
    mode: str = PATHLOSS_SHADOWING

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown channel mode {self.mode!r}; expected one of {_MODES}")
        if self.pathloss_exponent <= 0:
            raise ValueError("pathloss_exponent must be positive")
        if self.shadowing_variance < 0:
            raise ValueError("shadowing_variance must be >= 0")
        if not 0 < self.shadowing_decay < 1:
            raise ValueError("shadowing_decay must lie in (0, 1)")

    @classmethod
    def free_space(cls, unit_distance_gain: float = -30.0) -> "ChannelModel":
        return cls(
            pathloss_exponent=2.0,
            unit_distance_gain=unit_distance_gain,
            shadowing_variance=0.0,
            mode=FREE_SPACE,
        )

    @property
    def shadowed(self) -> bool:
        return self.mode == PATHLOSS_SHADOWING and self.shadowing_variance > 0


def pathloss_gain(channel: ChannelModel, distance) -> np.ndarray:
    """Channel gain in dB at ``distance`` meters (clamped below at 0.1 m)."""
    d = np.maximum(np.asarray(distance, dtype=float), MIN_DISTANCE)
    return channel.unit_distance_gain - 10.0 * channel.pathloss_exponent * np.log10(d)


# ---------------------------------------------------------------- shadowing


@lru_cache(maxsize=8)
def _gudmundson_factor(grid: GridSpec, variance: float, decay: float) -> np.ndarray:
    pts = grid.points().reshape(-1, 2)
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    cov = variance * decay**dist
    jitter = 1e-10 * variance
    eye = np.eye(len(pts))
    for _ in range(4):
        try:
            return np.linalg.cholesky(cov + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10
    raise np.linalg.LinAlgError(
        f"Cholesky of the shadowing covariance failed even with jitter {jitter / 10:g}"
    )


def gudmundson_field(
    grid: GridSpec, variance: float, decay: float, seed=None, size: int | None = None
) -> np.ndarray:
    """Zero-mean Gaussian field (dB) with covariance ``variance * decay**distance``.

    Returns ``(n_y, n_x)``, or ``(size, n_y, n_x)`` when ``size`` is given.
    """
    rng = np.random.default_rng(seed)
    n = 1 if size is None else size
    if variance == 0:
        out = np.zeros((n, grid.n_y, grid.n_x))
    else:
        factor = _gudmundson_factor(grid, float(variance), float(decay))
        z = rng.standard_normal((grid.size, n))
        out = (factor @ z).T.reshape(n, grid.n_y, grid.n_x)
    return out[0] if size is None else out


# ---------------------------------------------------------------- bases

GAUSSIAN = "gaussian"
RAISED_COSINE = "raised_cosine"
CONSTANT = "constant"
CONSTANT_NOISE = "constant_noise"
_KINDS = (GAUSSIAN, RAISED_COSINE, CONSTANT, CONSTANT_NOISE)


def _raised_cosine(f_mhz, center, bandwidth, rolloff):
    x = np.abs(f_mhz - center)
    lo = (1 - rolloff) * bandwidth / 2
    hi = (1 + rolloff) * bandwidth / 2
    out = np.where(x <= lo, 1.0, 0.0)
    if rolloff > 0:
        taper = 0.5 * (1 + np.cos(np.pi / (rolloff * bandwidth) * (x - lo)))
        out = np.where((x > lo) & (x <= hi), taper, out)
    return out


@dataclass
class BasisSet:
    """Frequency basis functions evaluated on ``frequencies``.

    ``widths`` hold the Gaussian std-dev, the raised-cosine bandwidth, or
    the band of a constant basis (all in Hz). A noise basis, if present, is
    the last one. With two or more frequencies each basis is rescaled so its
    trapezoidal integral over the grid (in MHz) is one; with a single
    frequency the analytic normalisation is used.
    """

    kinds: Sequence[str]
    centers: Sequence[float]
    widths: Sequence[float]
    frequencies: Sequence[float]
    rolloff: float = 0.4

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.centers = tuple(float(c) for c in self.centers)
        self.widths = tuple(float(w) for w in self.widths)
        self.frequencies = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        if not (len(self.kinds) == len(self.centers) == len(self.widths)):
            raise ValueError("kinds, centers and widths must have equal length")
        if not self.kinds:
            raise ValueError("basis set is empty")
        for k in self.kinds:
            if k not in _KINDS:
                raise ValueError(f"unknown basis kind {k!r}")
        n_noise = self.kinds.count(CONSTANT_NOISE)
        if n_noise > 1 or (n_noise == 1 and self.kinds[-1] != CONSTANT_NOISE):
            raise ValueError("at most one noise basis is allowed and it must be last")
        if any(w <= 0 for w in self.widths):
            raise ValueError("basis widths must be positive")
        self._values = self._evaluate()

    @property
    def size(self) -> int:
        return len(self.kinds)

    @property
    def has_noise(self) -> bool:
        return self.kinds[-1] == CONSTANT_NOISE

    @property
    def n_signal(self) -> int:
        return self.size - int(self.has_noise)

    @property
    def values(self) -> np.ndarray:
        """``(B, n_f)`` array of basis values in 1/MHz."""
        return self._values

    def _evaluate(self) -> np.ndarray:
        f = self.frequencies / MHZ
        out = np.empty((self.size, len(f)))
        for b, (kind, c, w) in enumerate(zip(self.kinds, self.centers, self.widths)):
            c, w = c / MHZ, w / MHZ
            if kind == GAUSSIAN:
                out[b] = np.exp(-0.5 * ((f - c) / w) ** 2) / (w * math.sqrt(2 * math.pi))
            elif kind == RAISED_COSINE:
                out[b] = _raised_cosine(f, c, w, self.rolloff) / w
            else:
                band = (f[-1] - f[0]) if len(f) > 1 else w
                out[b] = 1.0 / band
        if len(f) > 1:
            area = np.trapezoid(out, f, axis=1)
            if np.any(area <= 0):
                raise ValueError("a basis function vanishes on the evaluation grid")
            out /= area[:, None]
        return out

    def to_dict(self) -> dict:
        return {
            "kinds": list(self.kinds),
            "centers": list(self.centers),
            "widths": list(self.widths),
            "frequencies": self.frequencies.tolist(),
            "rolloff": self.rolloff,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSet":
        return cls(d["kinds"], d["centers"], d["widths"], d["frequencies"], d.get("rolloff", 0.4))

    @classmethod
    def power(cls, frequency: float = 1400e6, bandwidth: float = 1e6) -> "BasisSet":
        """Single flat basis of value 1/MHz at one frequency: maps carry power in dBm."""
        return cls([CONSTANT], [frequency], [bandwidth], [frequency])

    @classmethod
    def uniform(
        cls,
        kind: str = GAUSSIAN,
        n_signal: int = 3,
        band: tuple[float, float] = (1380e6, 1420e6),
        n_f: int = 32,
        width: float | None = None,
        rolloff: float = 0.4,
        noise: bool = True,
    ) -> "BasisSet":
        """``n_signal`` bases evenly spaced inside ``band`` plus an optional noise basis.

        Default widths: Gaussian std 5 MHz, raised-cosine bandwidth 10 MHz.
        """
        lo, hi = band
        if width is None:
            width = 5e6 if kind == GAUSSIAN else 10e6
        step = (hi - lo) / (n_signal + 1)
        centers = [lo + (b + 1) * step for b in range(n_signal)]
        kinds = [kind] * n_signal
        widths = [width] * n_signal
        if noise:
            kinds.append(CONSTANT_NOISE)
            centers.append((lo + hi) / 2)
            widths.append(hi - lo)
        return cls(kinds, centers, widths, np.linspace(lo, hi, n_f), rolloff)


def bem_reconstruct(coeffs: np.ndarray, basis: BasisSet) -> np.ndarray:
    """Linear PSD ``sum_b coeffs[..., b] * beta_b(f)``."""
    return np.asarray(coeffs) @ basis.values


# ---------------------------------------------------------------- synthesis


def synthesize_map(
    grid: GridSpec,
    sources: Sequence[SourceConfig],
    channel: ChannelModel,
    basis: BasisSet,
    noise_psd: float | None = None,
    seed=None,
    shadowing: np.ndarray | None = None,
) -> tuple[MapTensor, np.ndarray]:
    """Received PSD map (dB) and its linear coefficient tensor ``(n_y, n_x, B)``.

    Each source gets one shadowing field shared by all its channels. The
    noise coefficient is chosen so that the noise PSD equals ``noise_psd``
    (dBm/MHz) across the band. ``shadowing`` optionally supplies the
    per-source fields ``(S, n_y, n_x)`` directly.
    """
    if noise_psd is not None and not basis.has_noise:
        raise ValueError("noise_psd given but the basis set has no noise basis")
    if not sources and noise_psd is None:
        raise ValueError("at least one source (or a noise level) is required")
    pts = grid.points()
    coeffs = np.zeros((grid.n_y, grid.n_x, basis.size))
    if shadowing is None and channel.shadowed and sources:
        shadowing = gudmundson_field(
            grid,
            channel.shadowing_variance,
            channel.shadowing_decay,
            seed=seed,
            size=len(sources),
        )
    for s, src in enumerate(sources):
        if len(src.powers_dbm) != basis.n_signal:
            raise ValueError(
                f"source {s} has {len(src.powers_dbm)} channel powers, basis has "
                f"{basis.n_signal} signal functions"
            )
        dist = np.linalg.norm(pts - np.asarray(src.position), axis=-1)
        gain_db = pathloss_gain(channel, dist)
        if shadowing is not None:
            gain_db = gain_db + shadowing[s]
        gain = to_linear(gain_db)
        coeffs[:, :, : basis.n_signal] += gain[:, :, None] * to_linear(src.powers_dbm)
    if noise_psd is not None:
        coeffs[:, :, -1] = to_linear(noise_psd) / basis.values[-1, 0]
    psd = bem_reconstruct(coeffs, basis)
    return MapTensor(grid, to_db(psd), basis.frequencies), coeffs


def sample_map(
    map_: MapTensor,
    n_samples: int,
    noise_std: float = 1.0,
    buildings: np.ndarray | None = None,
    restrict_to: np.ndarray | None = None,
    seed=None,
) -> SampledMap:
    """Draw ``n_samples`` cells uniformly without replacement and add dB noise.

    Eligible cells are ``restrict_to`` (boolean mask) if given, otherwise
    every cell outside ``buildings``.
    """
    rng = np.random.default_rng(seed)
    grid = map_.grid
    if restrict_to is not None:
        eligible = np.asarray(restrict_to, dtype=bool)
    elif buildings is not None:
        eligible = ~np.asarray(buildings, dtype=bool)
    else:
        eligible = np.ones(grid.shape, dtype=bool)
    cells = np.flatnonzero(eligible.ravel())
    if n_samples > len(cells):
        raise ValueError(f"n_samples={n_samples} exceeds the {len(cells)} eligible cells")
    if n_samples < 0:
        raise ValueError("n_samples must be >= 0")
    chosen = np.sort(rng.choice(cells, size=n_samples, replace=False))
    mask = np.zeros(grid.size)
    mask[chosen] = 1.0
    mask = mask.reshape(grid.shape)
    values = np.zeros_like(map_.values)
    noise = rng.normal(0.0, noise_std, size=(n_samples, map_.n_f)) if noise_std > 0 else 0.0
    flat_true = map_.values.reshape(grid.size, -1)
    flat_vals = values.reshape(grid.size, -1)
    flat_vals[chosen] = flat_true[chosen] + noise
    return SampledMap(grid, values, mask, map_.frequencies, buildings=buildings)


# ---------------------------------------------------------------- datasets


@dataclass
class GeneratorConfig:
    """Recipe for one family of synthetic maps.

    ``n_samples`` is a fixed count or an inclusive ``[lo, hi]`` range drawn
    uniformly per record. ``fixed_powers_dbm`` switches off the random
    power draw (toy free-space setup).
    """

    side: float = 100.0
    n_grid: int = 32
    n_sources: int = 2
    power_range_dbm: tuple[float, float] = (5.0, 11.0)
    fixed_powers_dbm: list[float] | None = None
    height: float = 1.5
    channel: dict = field(default_factory=dict)
    basis: dict | None = None
    noise_psd_range: tuple[float, float] | None = None
    n_samples: int | list[int] = 100
    measurement_noise_std: float = 1.0
    extra_input_noise_std: float = 0.0

    def __post_init__(self):
        self.channel_model = ChannelModel(**self.channel)
        self.basis_set = BasisSet.from_dict(self.basis) if self.basis else BasisSet.power()
        self.grid = GridSpec.square(self.side, self.n_grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel"] = asdict(self.channel_model)
        d["basis"] = self.basis_set.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for key in ("power_range_dbm", "noise_psd_range"):
            if known.get(key) is not None:
                known[key] = tuple(known[key])
        return cls(**known)

    @classmethod
    def gudmundson(cls, n_grid: int = 32, n_samples=100, **kw) -> "GeneratorConfig":
        return cls(n_grid=n_grid, n_samples=n_samples, **kw)

    @classmethod
    def free_space_toy(cls, n_grid: int = 16, n_samples=40, power_dbm: float = 10.0, **kw):
        kw.setdefault("channel", asdict(ChannelModel.free_space()))
        return cls(
            n_grid=n_grid,
            n_samples=n_samples,
            fixed_powers_dbm=[power_dbm],
            **kw,
        )


@dataclass
class DatasetRecord:
    true_map: MapTensor
    sampled: SampledMap
    coefficients: np.ndarray | None = None
    sources: list = field(default_factory=list)


def record_seed(seed: int, t: int) -> np.random.SeedSequence:
    """Per-record seed derived from (master seed, index) only."""
    return np.random.SeedSequence([int(seed), int(t)])


def generate_record(cfg: GeneratorConfig, seed: int, t: int) -> DatasetRecord:
    rng = np.random.default_rng(record_seed(seed, t))
    basis = cfg.basis_set
    grid = cfg.grid
    sources = []
    for _ in range(cfg.n_sources):
        pos = rng.uniform(0.0, cfg.side, size=2)
        if cfg.fixed_powers_dbm is not None:
            powers = np.resize(np.asarray(cfg.fixed_powers_dbm, float), basis.n_signal)
        else:
            powers = rng.uniform(*cfg.power_range_dbm, size=basis.n_signal)
        sources.append(SourceConfig(tuple(pos), tuple(powers), cfg.height))
    noise_psd = None
    if basis.has_noise:
        lo, hi = cfg.noise_psd_range or (-100.0, -90.0)
        noise_psd = rng.uniform(lo, hi)
    true_map, coeffs = synthesize_map(
        grid, sources, cfg.channel_model, basis, noise_psd=noise_psd, seed=rng
    )
    n = cfg.n_samples
    if isinstance(n, (list, tuple)):
        n = int(rng.integers(n[0], n[1] + 1))
    sampled = sample_map(true_map, n, cfg.measurement_noise_std, seed=rng)
    if cfg.extra_input_noise_std > 0:
        extra = rng.normal(0.0, cfg.extra_input_noise_std, size=sampled.values.shape)
        sampled.values = sampled.values + extra * sampled.sample_mask[:, :, None]
    return DatasetRecord(true_map, sampled, coeffs, sources)


def generate_dataset(T: int, cfg: GeneratorConfig, seed: int = 0, start: int = 0) -> Iterator[DatasetRecord]:
    """Yield ``T`` independent records; record ``t`` depends only on (seed, t)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    for t in range(start, start + T):
        yield generate_record(cfg, seed, t)


def _record_paths(root: Path, t: int) -> dict[str, Path]:
    stem = f"record_{t:06d}"
    return {
        "true": root / f"{stem}_true.rmt",
        "sampled": root / f"{stem}_sampled.rmt",
        "mask": root / f"{stem}_mask.rmt",
        "coeffs": root / f"{stem}_coeffs.rmt",
        "buildings": root / f"{stem}_buildings.rmt",
    }


def write_dataset(
    root, records: Iterator[DatasetRecord], T: int, cfg: GeneratorConfig, seed: int,
    extra: dict | None = None,
) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    count = 0
    for t, rec in enumerate(records):
        paths = _record_paths(root, t)
        rmt.save(paths["true"], rec.true_map.values)
        rmt.save(paths["sampled"], rec.sampled.values)
        rmt.save(paths["mask"], rec.sampled.sample_mask)
        if rec.coefficients is not None:
            rmt.save(paths["coeffs"], rec.coefficients)
        if rec.sampled.buildings is not None:
            rmt.save(paths["buildings"], rec.sampled.buildings.astype(float))
        count += 1
    manifest = {
        "format": "radiomap-dataset-1",
        "T": count,
        "seed": seed,
        "grid": cfg.grid.to_dict(),
        "frequencies": cfg.basis_set.frequencies.tolist(),
        "basis": cfg.basis_set.to_dict(),
        "generator": cfg.to_dict(),
    }
    if extra:
        manifest.update(extra)
    rmt.atomic_write_bytes(
        root / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    )
    return root


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    return json.loads(path.read_text())


def load_dataset(root) -> Iterator[DatasetRecord]:
    root = Path(root)
    manifest = read_manifest(root)
    grid = GridSpec.from_dict(manifest["grid"])
    freqs = np.asarray(manifest["frequencies"])
    for t in range(manifest["T"]):
        paths = _record_paths(root, t)
        true = MapTensor(grid, rmt.load(paths["true"]), freqs)
        buildings = rmt.load(paths["buildings"]) > 0 if paths["buildings"].exists() else None
        sampled = SampledMap(
            grid, rmt.load(paths["sampled"]), rmt.load(paths["mask"]), freqs, buildings=buildings
        )
        coeffs = rmt.load(paths["coeffs"]) if paths["coeffs"].exists() else None
        yield DatasetRecord(true, sampled, coeffs)


def ingest_external(
    map_file,
    building_mask_file=None,
    frequencies=None,
    grid: GridSpec | None = None,
    side: float = 100.0,
    smooth: bool = False,
) -> tuple[MapTensor, np.ndarray]:
    """Load an externally produced map (and optional building mask) from RMT1 files.

    Returns the map and a boolean building mask (all False without a mask
    file). ``smooth=True`` applies the 9-nearest-point linear average.
    """
    values = rmt.load(map_file)
    if values.ndim == 2:
        values = values[:, :, None]
    if values.ndim != 3:
        raise ValueError(f"{map_file}: expected a rank 2 or 3 map, got rank {values.ndim}")
    n_y, n_x, n_f = values.shape
    if grid is None:
        delta = side / (n_x - 1) if n_x > 1 else side
        grid = GridSpec(n_y, n_x, delta, delta)
    elif grid.shape != (n_y, n_x):
        raise ValueError(f"{map_file}: map shape {(n_y, n_x)} does not match grid {grid.shape}")
    if frequencies is None:
        frequencies = np.zeros(n_f) if n_f == 1 else np.arange(n_f, dtype=float)
    frequencies = np.atleast_1d(np.asarray(frequencies, dtype=float))
    if len(frequencies) != n_f:
        raise ValueError(f"{map_file}: {n_f} frequency slices but {len(frequencies)} frequencies")
    if building_mask_file is not None:
        bmask = rmt.load(building_mask_file)
        if bmask.shape != (n_y, n_x):
            raise ValueError(
                f"{building_mask_file}: mask shape {bmask.shape} does not match map "
                f"shape {(n_y, n_x)}"
            )
        buildings = bmask != 0
    else:
        buildings = np.zeros((n_y, n_x), dtype=bool)
    map_ = MapTensor(grid, values, frequencies)
    if smooth:
        map_ = smooth_map(map_, 9)
    return map_, buildings
