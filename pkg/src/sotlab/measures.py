"""Probability measures on R^d for d in {1, 2}.

Three representations: weighted point clouds (DiscreteMeasure), densities on
axis-aligned regular grids (GridMeasure), and Gaussian specifications used as
a test-measure factory (GaussianSpec).  All values are immutable after
construction and safe to share across threads; sampling takes an explicit
seed and never touches global RNG state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import EmptyInput, GridTooNarrow
from .rng import STREAM_MEASURES, make_rng

WEIGHT_TOL = 1e-12
GRID_MASS_TOL = 1e-10
COV_SYM_TOL = 1e-12


def _points_array(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[1] not in (1, 2):
        raise ValueError(f"points must be (n, d) with d in {{1, 2}}, got shape {pts.shape}")
    return pts


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted atoms; weights are normalised to total mass 1 (within 1e-12).

    Atoms must be pairwise distinct under exact bit equality of coordinates
    (duplicate merging is the caller's job, see :func:`empirical`); weights
    equal to zero are dropped, negative weights are rejected.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = _points_array(self.points)
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.shape[0] == 0:
            raise EmptyInput("discrete measure needs at least one atom")
        if w.shape[0] != pts.shape[0]:
            raise ValueError("points and weights length mismatch")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        keep = w > 0.0
        pts, w = pts[keep], w[keep]
        if pts.shape[0] == 0:
            raise ValueError("all weights are zero")
        total = w.sum()
        w = w / total
        if np.unique(pts, axis=0).shape[0] != pts.shape[0]:
            raise ValueError("atoms must be pairwise distinct (merge duplicates first)")
        assert abs(w.sum() - 1.0) <= WEIGHT_TOL
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Axis-aligned regular grid: lower corner `origin`, one scalar `spacing`,
    `counts` cells per axis.  Cell i has its centre at origin + (i + 1/2) h."""

    origin: np.ndarray
    spacing: float
    counts: tuple

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float).ravel()
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if origin.shape[0] != len(counts):
            raise ValueError("origin and counts must agree on dimension")
        if len(counts) not in (1, 2):
            raise ValueError("only d in {1, 2} supported")
        if self.spacing <= 0 or any(c < 1 for c in counts):
            raise ValueError("spacing must be positive and counts >= 1")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "counts", counts)

    @property
    def d(self) -> int:
        return len(self.counts)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.counts))

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.d

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.spacing * np.asarray(self.counts, dtype=float)

    def axis_centers(self, axis: int) -> np.ndarray:
        n = self.counts[axis]
        return self.origin[axis] + self.spacing * (np.arange(n) + 0.5)

    def centers(self) -> np.ndarray:
        """Cell centres as an (n_cells, d) array in C (row-major) order."""
        axes = [self.axis_centers(i) for i in range(self.d)]
        if self.d == 1:
            return axes[0][:, None]
        gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    @classmethod
    def from_bounds(cls, lo, hi, cells) -> "GridSpec":
        """Grid covering [lo, hi] with `cells` cells along the first axis;
        other axes get the same spacing, expanded upward to cover hi."""
        lo = np.asarray(lo, dtype=float).ravel()
        hi = np.asarray(hi, dtype=float).ravel()
        if np.any(hi <= lo):
            raise ValueError("need hi > lo componentwise")
        h = (hi[0] - lo[0]) / int(cells)
        counts = tuple(int(np.ceil((hi[i] - lo[i]) / h - 1e-12)) for i in range(lo.shape[0]))
        return cls(origin=lo, spacing=h, counts=counts)


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Nonnegative density per grid cell, normalised so sum(density) h^d = 1
    within 1e-10.  `density` is stored with shape == grid.counts."""

    grid: GridSpec
    density: np.ndarray

    def __post_init__(self):
        dens = np.asarray(self.density, dtype=float)
        if dens.size != self.grid.n_cells:
            raise ValueError("density size does not match grid cell count")
        dens = dens.reshape(self.grid.counts)
        if np.any(dens < 0) or not np.all(np.isfinite(dens)):
            raise ValueError("density must be finite and nonnegative")
        total = dens.sum() * self.grid.cell_volume
        if total <= 0:
            raise ValueError("density must have positive total mass")
        dens = dens / total
        assert abs(dens.sum() * self.grid.cell_volume - 1.0) <= GRID_MASS_TOL
        object.__setattr__(self, "density", dens)

    @property
    def d(self) -> int:
        return self.grid.d

    def masses(self) -> np.ndarray:
        """Cell masses (density * h^d), flattened in C order."""
        return self.density.ravel() * self.grid.cell_volume

    def centers(self) -> np.ndarray:
        return self.grid.centers()


@dataclass(frozen=True, eq=False)
class GaussianSpec:
    """Gaussian N(mean, covariance); covariance must be symmetric (1e-12) SPD."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if mean.shape[0] not in (1, 2) or cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError("mean must be a d-vector and covariance d x d, d in {1, 2}")
        if np.max(np.abs(cov - cov.T)) > COV_SYM_TOL:
            raise ValueError("covariance not symmetric within 1e-12")
        if np.min(np.linalg.eigvalsh(cov)) <= 0:
            raise ValueError("covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def std_axes(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        L = np.linalg.cholesky(self.covariance)
        z = np.linalg.solve(L, (x - self.mean).T).T
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return -0.5 * np.sum(z * z, axis=1) - 0.5 * (self.d * np.log(2 * np.pi) + logdet)


Measure = Union[DiscreteMeasure, GridMeasure, GaussianSpec]


def moment_r(m: Measure, r: float) -> float:
    """Integral of |x|^r against the measure (exact weighted sum for atoms,
    midpoint rule for grids, closed form reduction for Gaussians at r=2)."""
    if r < 0:
        raise ValueError("moment order r must be >= 0")
    if isinstance(m, DiscreteMeasure):
        norms = np.linalg.norm(m.points, axis=1)
        return float(np.sum(m.weights * _safe_pow(norms, r)))
    if isinstance(m, GridMeasure):
        norms = np.linalg.norm(m.centers(), axis=1)
        return float(np.sum(m.masses() * _safe_pow(norms, r)))
    if isinstance(m, GaussianSpec):
        if r == 0:
            return 1.0
        if r == 2:
            return float(np.trace(m.covariance) + m.mean @ m.mean)
        # generic order: Gauss-Hermite on each axis is overkill here; grid it
        return moment_r(discretize_gaussian(m, _auto_grid(m.mean, m.std_axes(), 2001, 10.0)), r)
    raise TypeError(f"unsupported measure type {type(m)!r}")


def _safe_pow(base: np.ndarray, r: float) -> np.ndarray:
    # |x|^r through exp(r log|x|), exact 0 at x = 0
    out = np.zeros_like(base)
    nz = base > 0.0
    out[nz] = np.exp(r * np.log(base[nz]))
    return out


def mean_of(m: Measure) -> np.ndarray:
    if isinstance(m, DiscreteMeasure):
        return m.weights @ m.points
    if isinstance(m, GridMeasure):
        return m.masses() @ m.centers()
    if isinstance(m, GaussianSpec):
        return m.mean.copy()
    raise TypeError(f"unsupported measure type {type(m)!r}")


def _auto_grid(mean: np.ndarray, std: np.ndarray, cells: int, cover: float) -> GridSpec:
    lo = mean - cover * std
    hi = mean + cover * std
    return GridSpec.from_bounds(lo, hi, cells)


def discretize_gaussian(g: GaussianSpec, grid: GridSpec) -> GridMeasure:
    """Gaussian density sampled at cell centres and renormalised to mass 1.

    The grid must cover mean +- 6 sigma on every axis (sigma from the
    covariance diagonal), otherwise GridTooNarrow is raised.
    """
    std = g.std_axes()
    lo_needed = g.mean - 6.0 * std
    hi_needed = g.mean + 6.0 * std
    if np.any(grid.origin > lo_needed + 1e-12) or np.any(grid.upper < hi_needed - 1e-12):
        raise GridTooNarrow(
            f"grid [{grid.origin}, {grid.upper}] does not cover 6 sigma "
            f"[{lo_needed}, {hi_needed}]"
        )
    dens = np.exp(g.log_pdf(grid.centers()))
    return GridMeasure(grid=grid, density=dens.reshape(grid.counts))


def sample(m: Measure, n: int, seed: int) -> np.ndarray:
    """n i.i.d. draws, deterministic given seed; returns an (n, d) array.

    Grid sampling draws a cell proportionally to its mass, then a uniform
    point within the cell.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    rng = make_rng(seed, STREAM_MEASURES)
    if isinstance(m, DiscreteMeasure):
        idx = rng.choice(m.n_atoms, size=n, p=m.weights)
        return m.points[idx].copy()
    if isinstance(m, GridMeasure):
        masses = m.masses()
        idx = rng.choice(masses.shape[0], size=n, p=masses / masses.sum())
        jitter = (rng.random((n, m.d)) - 0.5) * m.grid.spacing
        return m.centers()[idx] + jitter
    if isinstance(m, GaussianSpec):
        L = np.linalg.cholesky(m.covariance)
        z = rng.standard_normal((n, m.d))
        return m.mean + z @ L.T
    raise TypeError(f"unsupported measure type {type(m)!r}")


def empirical(points) -> DiscreteMeasure:
    """Uniform weights 1/n; duplicate points merged by exact bit equality."""
    pts = _points_array(points)
    if pts.shape[0] == 0:
        raise EmptyInput("empirical measure needs at least one point")
    uniq, counts = np.unique(pts, axis=0, return_counts=True)
    return DiscreteMeasure(points=uniq, weights=counts / pts.shape[0])


# ---------------------------------------------------------------------------
# JSON wire format: {"type": "discrete" | "grid" | "gaussian", ...}

def measure_to_json(m: Measure) -> dict:
    if isinstance(m, DiscreteMeasure):
        return {"type": "discrete", "points": m.points.tolist(), "weights": m.weights.tolist()}
    if isinstance(m, GridMeasure):
        return {
            "type": "grid",
            "origin": m.grid.origin.tolist(),
            "spacing": m.grid.spacing,
            "counts": list(m.grid.counts),
            "density": m.density.ravel().tolist(),
        }
    if isinstance(m, GaussianSpec):
        return {"type": "gaussian", "mean": m.mean.tolist(), "cov": m.covariance.tolist()}
    raise TypeError(f"unsupported measure type {type(m)!r}")


def measure_from_json(spec: dict) -> Measure:
    kind = spec.get("type")
    if kind == "discrete":
        return DiscreteMeasure(points=spec["points"], weights=spec["weights"])
    if kind == "grid":
        grid = GridSpec(origin=spec["origin"], spacing=spec["spacing"], counts=tuple(spec["counts"]))
        return GridMeasure(grid=grid, density=np.asarray(spec["density"]))
    if kind == "gaussian":
        return GaussianSpec(mean=spec["mean"], covariance=spec["cov"])
    raise ValueError(f"unknown measure type {kind!r}")
