"""RMSE, estimator sweeps and latent-space probes."""
from __future__ import annotations

import csv
import io
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rmt
from .baselines import BaselineConfig, run_baseline
from .grid import MapTensor, SampledMap
from .propagation import GeneratorConfig, generate_record

SWEEP_VARIABLES = ("omega_size", "code_length", "depth", "activation")
CSV_FIELDS = ("sweep_variable", "sweep_value", "estimator", "trials", "rmse_db", "stderr_db")
DEFAULT_WINDOW = (-110.0, -40.0)


def squared_error(true_map, estimate) -> float:
    """Mean squared dB error over cells and frequencies for one map pair."""
    a = np.asarray(getattr(true_map, "values", true_map), dtype=float)
    b = np.asarray(getattr(estimate, "values", estimate), dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def rmse(true_map, estimate) -> float:
    return float(np.sqrt(squared_error(true_map, estimate)))


def rmse_over_trials(sq_errors):
    """RMSE from per-trial mean squared errors, with a delta-method standard error.

    The squared errors are averaged before the root. The standard error of
    ``sqrt(m)`` is ``se(m) / (2 sqrt(m))``; it is NaN for a single trial.
    """
    e = np.asarray(sq_errors, dtype=float)
    if e.size == 0:
        raise ValueError("no trials")
    m = float(e.mean())
    r = float(np.sqrt(m))
    if e.size < 2:
        return r, float("nan")
    se_m = float(e.std(ddof=1) / np.sqrt(e.size))
    return r, (0.0 if m == 0 else se_m / (2.0 * r))


# ---------------------------------------------------------------- PGM


def pgm_bytes(values_db, window=DEFAULT_WINDOW, observed=None) -> bytes:
    """8-bit binary PGM of a 2-D dB array, linearly scaled over ``window``.

    Row ``i`` of the array is image row ``i``. Cells where ``observed`` is
    False are drawn black.
    """
    v = np.asarray(values_db, dtype=float)
    if v.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    lo, hi = map(float, window)
    if not hi > lo:
        raise ValueError("dB window must have hi > lo")
    pix = np.clip(np.rint((v - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    if observed is not None:
        pix = np.where(np.asarray(observed, bool), pix, 0).astype(np.uint8)
    h, w = pix.shape
    header = f"P5\n# dB window [{lo:g}, {hi:g}]\n{w} {h}\n255\n".encode()
    return header + pix.tobytes()


def write_pgm(path, values_db, window=DEFAULT_WINDOW, observed=None) -> Path:
    path = Path(path)
    rmt.atomic_write_bytes(path, pgm_bytes(values_db, window, observed))
    return path


def read_pgm(path):
    """Pixels and dB window of a PGM written by :func:`write_pgm`."""
    data = Path(path).read_bytes()
    lines = data.split(b"\n", 4)
    if lines[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    window = tuple(float(x) for x in lines[1].decode().split("[")[1].rstrip("]").split(","))
    w, h = (int(x) for x in lines[2].split())
    pix = np.frombuffer(lines[4], dtype=np.uint8)
    return pix.reshape(h, w), window


# ---------------------------------------------------------------- estimators


class TrueMapOracle:
    """Returns the true map; sanity reference for the sweep plumbing."""

    name = "true_oracle"

    def __call__(self, sampled, true_map):
        return true_map


class BaselineEstimator:
    def __init__(self, cfg: BaselineConfig, name=None):
        self.cfg = cfg
        self.name = name or cfg.method

    def __call__(self, sampled, true_map):
        return run_baseline(sampled, self.cfg)


class NetworkEstimator:
    def __init__(self, model, name="autoencoder"):
        self.model = model
        self.name = name

    def __call__(self, sampled, true_map):
        return self.model.estimate(sampled)


def build_estimator(entry, model_for=None):
    """Estimator from a name (``"knn"``) or a dict (``{"name": ..., "method": ..., ...}``).

    ``model_for(entry)`` resolves network estimators to a loaded model.
    """
    if isinstance(entry, str):
        entry = {"method": entry}
    entry = dict(entry)
    method = entry.pop("method", entry.get("name"))
    name = entry.pop("name", method)
    if method == "true_oracle":
        est = TrueMapOracle()
        est.name = name
        return est
    if method in ("knn", "kriging", "nuclear_norm", "nuclear-norm"):
        keys = BaselineConfig.__dataclass_fields__
        return BaselineEstimator(BaselineConfig(method=method, **{k: v for k, v in entry.items() if k in keys}), name)
    if method == "autoencoder":
        if model_for is None:
            raise ValueError(f"estimator {name!r} needs a trained model")
        return NetworkEstimator(model_for(entry), name)
    raise ValueError(f"unknown estimator {method!r}")


# ---------------------------------------------------------------- sweeps


@dataclass
class ExperimentConfig:
    """Sweep over one variable with a list of estimators.

    ``models`` maps a sweep value (as a string) or ``"default"`` to a
    model archive directory used by ``autoencoder`` estimators.
    """

    dataset: dict = field(default_factory=dict)
    estimators: list = field(default_factory=lambda: ["knn", "kriging"])
    sweep_variable: str = "omega_size"
    sweep_values: list = field(default_factory=lambda: [25, 50, 100, 200])
    trials: int = 10
    seed: int = 0
    output_dir: str | None = None
    models: dict = field(default_factory=dict)
    pgm_window: tuple = DEFAULT_WINDOW
    pgm_slice: int = 0

    def __post_init__(self):
        if self.sweep_variable not in SWEEP_VARIABLES:
            raise ValueError(f"unknown sweep variable {self.sweep_variable!r}; choose from {SWEEP_VARIABLES}")
        if not self.sweep_values:
            raise ValueError("sweep values must be non-empty")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.estimators:
            raise ValueError("need at least one estimator")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def trial_seed(seed, sweep_value, trial) -> int:
    """Sub-seed from (seed, sweep value, trial); independent of run order."""
    tag = zlib.crc32(repr(sweep_value).encode())
    return int(np.random.SeedSequence([int(seed), tag, int(trial)]).generate_state(1)[0])


def _model_loader(config: ExperimentConfig, value, cache):
    from .network.archive import load_model

    def resolve(entry):
        path = entry.get("model") or config.models.get(str(value)) or config.models.get("default")
        if path is None:
            raise FileNotFoundError(
                f"no model for sweep value {value!r} in experiment config "
                f"(sweep_variable={config.sweep_variable!r}); set models[{str(value)!r}]"
            )
        if not Path(path, "manifest.json").is_file():
            raise FileNotFoundError(f"model archive {path!r} (sweep value {value!r}) not found")
        if path not in cache:
            cache[path] = load_model(path)
        return cache[path]

    return resolve


def sweep(config: ExperimentConfig, estimators=None):
    """Average RMSE of each estimator at each sweep value.

    ``estimators`` optionally overrides the configured list with callables
    ``(sampled, true_map) -> MapTensor`` that carry a ``name``. Returns the
    CSV rows as dicts; writes ``results.csv`` and PGM panels when
    ``config.output_dir`` is set.
    """
    base = GeneratorConfig.from_dict(config.dataset) if config.dataset else GeneratorConfig()
    out_dir = Path(config.output_dir) if config.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    cache = {}
    for vi, value in enumerate(config.sweep_values):
        gen = replace(base, n_samples=int(value)) if config.sweep_variable == "omega_size" else base
        ests = estimators
        if ests is None:
            loader = _model_loader(config, value, cache)
            ests = [build_estimator(e, loader) for e in config.estimators]
        errors = {e.name: [] for e in ests}
        for trial in range(config.trials):
            rec = generate_record(gen, trial_seed(config.seed, value, trial), 0)
            for est in ests:
                m = est(rec.sampled, rec.true_map)
                errors[est.name].append(squared_error(rec.true_map, m))
                if out_dir is not None and trial == 0:
                    _write_panels(out_dir, vi, est.name, rec, m, config)
        for est in ests:
            r, se = rmse_over_trials(errors[est.name])
            rows.append({
                "sweep_variable": config.sweep_variable,
                "sweep_value": value,
                "estimator": est.name,
                "trials": config.trials,
                "rmse_db": r,
                "stderr_db": se,
            })
    if out_dir is not None:
        rmt.atomic_write_bytes(out_dir / "results.csv", rows_to_csv(rows).encode())
    return rows


def _write_panels(out_dir, vi, name, rec, est, config):
    f = config.pgm_slice
    window = config.pgm_window
    stem = f"point{vi:02d}"
    true_path = out_dir / f"{stem}_true.pgm"
    if not true_path.exists():
        write_pgm(true_path, rec.true_map.values[..., f], window)
        write_pgm(out_dir / f"{stem}_sampled.pgm", rec.sampled.values[..., f], window,
                  observed=rec.sampled.sample_mask == 1)
    write_pgm(out_dir / f"{stem}_estimate_{name}.pgm", est.values[..., f], window)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{row[k]:.6f}" if k in ("rmse_db", "stderr_db") else row[k]) for k in CSV_FIELDS})
    return buf.getvalue()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- latent probes

PROBE_KINDS = ("mean_code", "std_perturbation", "eigen_perturbation")


@dataclass
class LatentProbe:
    """One latent-space probe. ``subset`` and ``index`` are 1-based code indices."""

    kind: str = "mean_code"
    subset: list = field(default_factory=list)
    alpha: float = 10.0
    index: int = 1

    def __post_init__(self):
        if self.kind not in PROBE_KINDS:
            raise ValueError(f"unknown probe {self.kind!r}; choose from {PROBE_KINDS}")


@dataclass
class LatentStatistics:
    mean: np.ndarray
    std: np.ndarray
    covariance: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residual: float


def latent_statistics(codes) -> LatentStatistics:
    """Mean, standard deviation and covariance of a ``(T', N_lambda)`` code sample.

    Eigenpairs of the covariance are sorted by decreasing eigenvalue; the
    largest relative residual ``||C v - mu v|| / ||C||`` is recorded.
    """
    codes = np.asarray(codes, dtype=float)
    if codes.ndim != 2 or codes.shape[0] == 0:
        raise ValueError("codes must be a non-empty (T', N_lambda) array")
    mean = codes.mean(axis=0)
    centred = codes - mean
    cov = centred.T @ centred / codes.shape[0]
    std = np.sqrt(np.diag(cov))
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(np.linalg.norm(cov, 2), np.finfo(float).tiny)
    res = np.linalg.norm(cov @ evecs - evecs * evals, axis=0).max() / scale
    return LatentStatistics(mean, std, cov, evals, evecs, float(res))


def probe_code(stats: LatentStatistics, probe: LatentProbe) -> np.ndarray:
    n = len(stats.mean)
    if probe.kind == "mean_code":
        return stats.mean.copy()
    if probe.kind == "std_perturbation":
        idx = np.asarray(probe.subset, dtype=int)
        if idx.size and (idx.min() < 1 or idx.max() > n):
            raise ValueError(f"code indices must lie in [1, {n}]")
        code = stats.mean.copy()
        code[idx - 1] -= stats.std[idx - 1]
        return code
    if not 1 <= probe.index <= n:
        raise ValueError(f"eigen index {probe.index} outside [1, {n}]")
    return stats.mean + probe.alpha * stats.eigenvectors[:, probe.index - 1]


def latent_probe(model, codes, probe: LatentProbe, grid, frequencies=None) -> MapTensor:
    """Decode the probe code built from a code sample."""
    stats = latent_statistics(codes)
    return model.decode(probe_code(stats, probe), grid, frequencies)


def eigen_sensitivity(model, codes, indices, alpha, grid) -> float:
    """Mean L2 distance between decodes of ``mean + alpha v_i`` and of the mean."""
    stats = latent_statistics(codes)
    base = model.decode(stats.mean, grid).values
    dists = []
    for i in indices:
        m = model.decode(probe_code(stats, LatentProbe("eigen_perturbation", alpha=alpha, index=i)), grid)
        dists.append(np.linalg.norm(m.values - base))
    return float(np.mean(dists))


def encode_records(model, records) -> np.ndarray:
    return np.stack([model.encode(r.sampled if hasattr(r, "sampled") else r) for r in records])
