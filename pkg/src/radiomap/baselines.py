"""Classical map estimators: K-nearest neighbours, Gaussian-kernel ridge
regression ("kriging") and nuclear-norm matrix completion.

All estimators work on dB values and return a :class:`MapTensor` on the
grid of the sampled map.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .grid import GridSpec, MapTensor, SampledMap

METHODS = ("knn", "kriging", "nuclear_norm")


class ConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class BaselineConfig:
    method: str = "knn"
    k: int = 5
    reg: float = 1e-5
    kernel_sigma: float | str = "auto"
    svt_step: float = 1.0
    svt_max_iter: int = 2000
    svt_tol: float = 1e-6

    def __post_init__(self):
        self.method = self.method.replace("-", "_")
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline {self.method!r}; choose from {METHODS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.reg < 0:
            raise ValueError("reg must be >= 0")
        if self.svt_max_iter < 1:
            raise ValueError("svt_max_iter must be >= 1")
        if self.kernel_sigma != "auto" and float(self.kernel_sigma) <= 0:
            raise ValueError("kernel_sigma must be positive or 'auto'")

    def to_dict(self):
        return asdict(self)


def _observed(sampled: SampledMap):
    idx = np.flatnonzero(sampled.sample_mask.reshape(-1) == 1)
    pts = sampled.grid.points().reshape(-1, 2)
    vals = sampled.values.reshape(sampled.grid.size, -1)
    return idx, pts, vals


def knn_estimate(sampled: SampledMap, k: int = 5, chunk: int = 4096) -> MapTensor:
    """Mean (in dB) of the ``k`` nearest observed cells, per frequency.

    Distances are Euclidean in metres between cell centres; ties go to the
    observed cell that comes first in row-major order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    idx, pts, vals = _observed(sampled)
    if len(idx) < k:
        raise ValueError(f"KNN with k={k} needs at least {k} observed cells, got {len(idx)}")
    obs_pts, obs_vals = pts[idx], vals[idx]
    out = np.empty_like(vals, dtype=float)
    for s in range(0, len(pts), chunk):
        q = pts[s : s + chunk]
        d2 = ((q[:, None, :] - obs_pts[None, :, :]) ** 2).sum(-1)
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[s : s + chunk] = obs_vals[nearest].mean(axis=1)
    g = sampled.grid
    return MapTensor(g, out.reshape(g.n_y, g.n_x, -1), sampled.frequencies)


def auto_kernel_sigma(grid: GridSpec, n_observed: int) -> float:
    """Five times the mean spacing of ``n_observed`` points spread over the area."""
    if n_observed < 1:
        raise ValueError("need at least one observation")
    return 5.0 * np.sqrt(grid.delta_y * grid.n_y * grid.delta_x * grid.n_x / n_observed)


def gaussian_kernel(a, b, sigma):
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2.0 * sigma**2))


def kriging_estimate(sampled: SampledMap, reg: float = 1e-5, sigma="auto") -> MapTensor:
    """Gaussian-kernel ridge regression of the observed dB values.

    ``sigma`` is the kernel width in metres, or ``"auto"`` for
    :func:`auto_kernel_sigma`.
    """
    if reg < 0:
        raise ValueError("reg must be >= 0")
    idx, pts, vals = _observed(sampled)
    if len(idx) < 1:
        raise ValueError("kriging needs at least one observed cell")
    if sigma == "auto" or sigma is None:
        sigma = auto_kernel_sigma(sampled.grid, len(idx))
    sigma = float(sigma)
    if sigma <= 0:
        raise ValueError("kernel sigma must be positive")
    obs_pts = pts[idx]
    gram = gaussian_kernel(obs_pts, obs_pts, sigma)
    gram[np.diag_indices_from(gram)] += reg
    try:
        factor = linalg.cho_factor(gram, lower=True, check_finite=False)
        alpha = linalg.cho_solve(factor, vals[idx], check_finite=False)
    except linalg.LinAlgError:
        if reg == 0:
            raise linalg.LinAlgError(
                "kernel Gram matrix is singular with reg=0; use a positive reg"
            ) from None
        alpha = linalg.solve(gram, vals[idx], assume_a="sym")
    est = gaussian_kernel(pts, obs_pts, sigma) @ alpha
    g = sampled.grid
    return MapTensor(g, est.reshape(g.n_y, g.n_x, -1), sampled.frequencies)


@dataclass
class SVTResult:
    matrix: np.ndarray
    objective: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def nuclear_objective(x, target, mask, reg):
    r = np.where(mask, x - target, 0.0)
    return 0.5 * float((r**2).sum()) + reg * float(linalg.svdvals(x).sum())


def svt_complete(target, mask, reg=1e-5, step=1.0, max_iter=2000, tol=1e-6) -> SVTResult:
    """Proximal gradient for ``min 1/2 ||P(X - target)||^2 + reg ||X||_*``.

    Returns the iterate with the lowest objective. The objective trace has
    one entry per iterate, starting with the initial point.
    """
    target = np.asarray(target, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    x = np.where(mask, target, 0.0)
    obj = [nuclear_objective(x, target, mask, reg)]
    best, best_obj = x, obj[0]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        y = x - step * np.where(mask, x - target, 0.0)
        u, s, vt = linalg.svd(y, full_matrices=False)
        s = np.maximum(s - step * reg, 0.0)
        x_new = (u * s) @ vt
        f = 0.5 * float((np.where(mask, x_new - target, 0.0) ** 2).sum()) + reg * float(s.sum())
        obj.append(f)
        if f < best_obj:
            best, best_obj = x_new, f
        change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x), 1e-300)
        x = x_new
        if change < tol:
            converged = True
            break
    return SVTResult(best, obj, it, converged)


def nuclear_norm_complete(sampled: SampledMap, reg: float = 1e-5, step: float = 1.0,
                          max_iter: int = 2000, tol: float = 1e-6, return_info=False):
    """Nuclear-norm completion of each frequency slice of the dB map.

    Emits :class:`ConvergenceWarning` when a slice stops at ``max_iter``.
    """
    mask = sampled.sample_mask == 1
    out = np.empty(sampled.values.shape)
    info = []
    for f in range(sampled.n_f):
        res = svt_complete(sampled.values[..., f], mask, reg, step, max_iter, tol)
        if not res.converged:
            warnings.warn(
                f"nuclear-norm completion did not converge in {max_iter} iterations "
                f"(slice {f}); returning the best iterate",
                ConvergenceWarning,
                stacklevel=2,
            )
        out[..., f] = res.matrix
        info.append(res)
    est = MapTensor(sampled.grid, out, sampled.frequencies)
    return (est, info) if return_info else est


def run_baseline(sampled: SampledMap, cfg: BaselineConfig) -> MapTensor:
    if cfg.method == "knn":
        return knn_estimate(sampled, cfg.k)
    if cfg.method == "kriging":
        return kriging_estimate(sampled, cfg.reg, cfg.kernel_sigma)
    return nuclear_norm_complete(sampled, cfg.reg, cfg.svt_step, cfg.svt_max_iter, cfg.svt_tol)
