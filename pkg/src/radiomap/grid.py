"""Spatial grid, measurement aggregation and sample masks.

All map tensors are stored as ``(n_y, n_x, n_f)`` arrays in dB units.
Linear powers are in mW (or mW/MHz for PSDs); the dB floor is -200.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DB_FLOOR = -200.0
LIN_FLOOR = 1e-20
FILL_VALUE = 0.0


def to_db(linear):
    """Linear power to dB, clamping non-positive/tiny values to ``DB_FLOOR``."""
    lin = np.asarray(linear, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 10.0 * np.log10(np.where(lin > LIN_FLOOR, lin, LIN_FLOOR))
    return out


def to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


@dataclass(frozen=True)
class GridSpec:
    """Rectangular ``n_y x n_x`` grid with point (i, j) at
    ``origin + (j * delta_x, i * delta_y)``."""

    n_y: int
    n_x: int
    delta_x: float
    delta_y: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.n_y < 1 or self.n_x < 1:
            raise ValueError(f"grid needs n_y, n_x >= 1, got {self.n_y}x{self.n_x}")
        if not (self.delta_x > 0 and self.delta_y > 0):
            raise ValueError("grid spacing must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def square(cls, side: float, n: int) -> "GridSpec":
        """``n x n`` grid whose corner points span a square of ``side`` meters."""
        delta = side / (n - 1) if n > 1 else side
        return cls(n_y=n, n_x=n, delta_x=delta, delta_y=delta)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_y, self.n_x)

    @property
    def size(self) -> int:
        return self.n_y * self.n_x

    def point(self, i: int, j: int) -> np.ndarray:
        return np.array([self.origin[0] + j * self.delta_x, self.origin[1] + i * self.delta_y])

    def points(self) -> np.ndarray:
        """All grid points, shape ``(n_y, n_x, 2)`` with (x, y) in the last axis."""
        jj, ii = np.meshgrid(np.arange(self.n_x), np.arange(self.n_y))
        return np.stack(
            [self.origin[0] + jj * self.delta_x, self.origin[1] + ii * self.delta_y], axis=-1
        )

    def to_dict(self) -> dict:
        return {
            "n_y": self.n_y,
            "n_x": self.n_x,
            "delta_x": self.delta_x,
            "delta_y": self.delta_y,
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(d["n_y"], d["n_x"], d["delta_x"], d["delta_y"], tuple(d.get("origin", (0, 0))))


@dataclass
class MeasurementSet:
    """Scattered PSD measurements: ``locations`` (N, 2) in meters,
    ``values`` (N, n_f) in dB, ``frequencies`` (n_f,) in Hz."""

    locations: np.ndarray
    values: np.ndarray
    frequencies: np.ndarray

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        self.frequencies = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals.reshape(-1, len(self.frequencies))
        self.values = vals
        if len(self.locations) != len(self.values):
            raise ValueError(
                f"{len(self.locations)} locations but {len(self.values)} value rows"
            )
        if self.values.shape[1] != len(self.frequencies):
            raise ValueError("value rows must have one entry per frequency")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("measurement values must be finite")

    def __len__(self) -> int:
        return len(self.locations)


@dataclass
class MapTensor:
    grid: GridSpec
    values: np.ndarray
    frequencies: np.ndarray = field(default_factory=lambda: np.array([0.0]))

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 2:
            vals = vals[:, :, None]
        self.values = vals
        self.frequencies = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        if vals.shape[:2] != self.grid.shape:
            raise ValueError(f"map shape {vals.shape[:2]} does not match grid {self.grid.shape}")
        if vals.shape[2] != len(self.frequencies):
            raise ValueError(
                f"map has {vals.shape[2]} frequency slices but {len(self.frequencies)} frequencies"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("map entries must be finite")

    @property
    def n_f(self) -> int:
        return self.values.shape[2]


@dataclass
class SampledMap:
    """Aggregated measurements on the grid.

    ``sample_mask`` is 1 on observed cells and 0 elsewhere; when a building
    set is attached, :meth:`input_mask` returns the combined {0, 1, -1} mask.
    """

    grid: GridSpec
    values: np.ndarray
    sample_mask: np.ndarray
    frequencies: np.ndarray = field(default_factory=lambda: np.array([0.0]))
    buildings: np.ndarray | None = None
    meta_masks: list = field(default_factory=list)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 2:
            vals = vals[:, :, None]
        self.values = vals
        self.frequencies = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        self.sample_mask = (np.asarray(self.sample_mask) == 1).astype(float)
        if self.sample_mask.shape != self.grid.shape or vals.shape[:2] != self.grid.shape:
            raise ValueError("sampled map arrays must match the grid shape")
        if self.buildings is not None:
            self.buildings = np.asarray(self.buildings, dtype=bool)
            if self.buildings.shape != self.grid.shape:
                raise ValueError("building mask must match the grid shape")
            if np.any(self.buildings & (self.sample_mask == 1)):
                raise ValueError("observed cells and building cells overlap")
        self.meta_masks = [np.asarray(m, dtype=float) for m in self.meta_masks]
        for m in self.meta_masks:
            if m.shape != self.grid.shape:
                raise ValueError("meta masks must match the grid shape")

    @property
    def omega(self) -> set[tuple[int, int]]:
        ii, jj = np.nonzero(self.sample_mask == 1)
        return set(zip(ii.tolist(), jj.tolist()))

    @property
    def n_observed(self) -> int:
        return int(self.sample_mask.sum())

    @property
    def n_f(self) -> int:
        return self.values.shape[2]

    def input_mask(self) -> np.ndarray:
        if self.buildings is None:
            return self.sample_mask.copy()
        return combine_masks(self.sample_mask, self.buildings)

    def mask_channels(self) -> np.ndarray:
        """Mask plus meta masks stacked as ``(n_y, n_x, n_m)``."""
        return np.stack([self.input_mask(), *self.meta_masks], axis=-1)


@dataclass
class Assignment:
    """Nearest-grid-point assignment; ``flat[n]`` is the row-major cell of measurement n."""

    grid: GridSpec
    flat: np.ndarray

    def sets(self) -> dict[tuple[int, int], list[int]]:
        out: dict[tuple[int, int], list[int]] = {}
        for n, f in enumerate(self.flat.tolist()):
            out.setdefault(divmod(f, self.grid.n_x), []).append(n)
        return out

    def counts(self) -> np.ndarray:
        return np.bincount(self.flat, minlength=self.grid.size).reshape(self.grid.shape)


def _nearest_index(coord: np.ndarray, start: float, delta: float, n: int) -> np.ndarray:
    t = (coord - start) / delta
    lo = np.clip(np.floor(t), 0, n - 1).astype(np.int64)
    hi = np.clip(lo + 1, 0, n - 1)
    d_lo = np.abs(coord - (start + lo * delta))
    d_hi = np.abs(coord - (start + hi * delta))
    # ties go to the smaller index
    return np.where(d_hi < d_lo, hi, lo)


def assign_to_grid(grid: GridSpec, meas: MeasurementSet) -> Assignment:
    """Assign every measurement to its nearest grid point (row-major tie-break)."""
    loc = meas.locations
    if not np.all(np.isfinite(loc)):
        raise ValueError("measurement locations must be finite")
    # squared distance separates per axis, so per-axis nearest is the 2-D nearest
    j = _nearest_index(loc[:, 0], grid.origin[0], grid.delta_x, grid.n_x)
    i = _nearest_index(loc[:, 1], grid.origin[1], grid.delta_y, grid.n_y)
    return Assignment(grid, (i * grid.n_x + j).astype(np.int64))


def aggregate(
    grid: GridSpec, meas: MeasurementSet, assignment: Assignment | None = None
) -> SampledMap:
    """Average measurements per cell in linear power and convert back to dB."""
    if assignment is None:
        assignment = assign_to_grid(grid, meas)
    n_f = len(meas.frequencies)
    sums = np.zeros((grid.size, n_f))
    np.add.at(sums, assignment.flat, to_linear(meas.values))
    counts = np.bincount(assignment.flat, minlength=grid.size)
    observed = counts > 0
    values = np.full((grid.size, n_f), FILL_VALUE)
    values[observed] = to_db(sums[observed] / counts[observed, None])
    return SampledMap(
        grid=grid,
        values=values.reshape(grid.n_y, grid.n_x, n_f),
        sample_mask=observed.reshape(grid.shape).astype(float),
        frequencies=meas.frequencies,
    )


def cells_to_mask(grid: GridSpec, cells) -> np.ndarray:
    mask = np.zeros(grid.shape, dtype=bool)
    for i, j in cells:
        mask[i, j] = True
    return mask


def combine_masks(sample_mask, building_set) -> np.ndarray:
    """Merge the sample mask and a building set into a {0, 1, -1} mask.

    ``building_set`` may be a boolean array shaped like the mask or an
    iterable of (i, j) cells.
    """
    sm = np.asarray(sample_mask)
    obs = sm == 1
    if isinstance(building_set, np.ndarray) and building_set.shape == sm.shape:
        bld = building_set.astype(bool)
    else:
        bld = np.zeros(sm.shape, dtype=bool)
        for i, j in building_set:
            bld[i, j] = True
    if np.any(obs & bld):
        raise ValueError("inconsistent input: observed cells overlap the building set")
    out = np.zeros(sm.shape)
    out[obs] = 1.0
    out[bld] = -1.0
    return out


def neighbor_table(grid: GridSpec, k: int) -> np.ndarray:
    """Flat indices of the ``k`` grid points closest to each grid point.

    Returned shape is ``(n_y * n_x, k)``; distance ties go to the smaller
    row-major index.
    """
    if k < 1:
        raise ValueError("k_neighbors must be >= 1")
    if k > grid.size:
        raise ValueError(f"k_neighbors={k} exceeds the {grid.size} grid points")
    ii, jj = np.divmod(np.arange(grid.size), grid.n_x)
    di = ii[:, None] - ii[None, :]
    dj = jj[:, None] - jj[None, :]
    if grid.delta_x == grid.delta_y:
        d2 = (di * di + dj * dj).astype(float)
    else:
        d2 = np.round((di * grid.delta_y) ** 2 + (dj * grid.delta_x) ** 2, 9)
    # argsort is stable, so equal distances keep the row-major order
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def smooth_map(map_: MapTensor, k_neighbors: int = 9) -> MapTensor:
    """Replace each cell by the linear-domain mean over its ``k`` nearest cells."""
    table = neighbor_table(map_.grid, k_neighbors)
    lin = to_linear(map_.values).reshape(map_.grid.size, -1)
    smoothed = lin[table].mean(axis=1)
    return MapTensor(map_.grid, to_db(smoothed).reshape(map_.values.shape), map_.frequencies)
