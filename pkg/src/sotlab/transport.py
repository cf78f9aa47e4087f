"""Monge-Kantorovich power costs |x - y|^r on small supports.

solve_exact finds the exact optimum of the finite transportation LP (HiGHS
dual simplex behind the spec contract) and canonicalises the optimal vertex
with a second LP stage that prefers mass on low (row, col) indices, so ties
break lexicographically and results never depend on solver internals.

solve_quantile_1d computes the monotone-rearrangement value in one dimension
exactly for step CDFs; grid measures are atomised at their cell centres first
(the midpoint representation every other operation already uses), which keeps
the returned coupling a genuine coupling of the inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import DimensionError, GridTooNarrow, NumericalFailure, SizeExceeded
from .kernels import OUKernel, TransitionKernel
from .measures import (
    DiscreteMeasure,
    GaussianSpec,
    GridMeasure,
    GridSpec,
    mean_of,
    moment_r,
)

EXACT_SIZE_LIMIT = 10**6
MARGINAL_TOL = 1e-9
_HIGHS_OPTS = {
    "presolve": True,
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}


def power_cost_matrix(x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    """|x_i - y_j|^r via exp(r log|.|), exact 0 on the diagonal of equal points."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    diff = x[:, None, :] - y[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    out = np.zeros_like(dist)
    nz = dist > 0.0
    out[nz] = np.exp(r * np.log(dist[nz]))
    return out


@dataclass(frozen=True, eq=False)
class Coupling:
    """Joint mass matrix on row_support x col_support; total mass 1 (1e-9)."""

    row_support: np.ndarray
    col_support: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.row_support, dtype=float))
        cols = np.atleast_2d(np.asarray(self.col_support, dtype=float))
        mass = np.asarray(self.mass, dtype=float)
        if mass.shape != (rows.shape[0], cols.shape[0]):
            raise ValueError("mass shape must be (len(rows), len(cols))")
        if np.any(mass < 0):
            raise ValueError("mass must be nonnegative")
        if abs(mass.sum() - 1.0) > MARGINAL_TOL:
            raise ValueError(f"total mass {mass.sum()} not 1 within {MARGINAL_TOL}")
        object.__setattr__(self, "row_support", rows)
        object.__setattr__(self, "col_support", cols)
        object.__setattr__(self, "mass", mass)

    def row_marginal(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    def col_marginal(self) -> np.ndarray:
        return self.mass.sum(axis=0)

    def marginal_residual(self, p_weights: np.ndarray, q_weights: np.ndarray) -> float:
        """Max L1 deviation of the two marginals from (p, q)."""
        rp = float(np.abs(self.row_marginal() - p_weights).sum())
        rq = float(np.abs(self.col_marginal() - q_weights).sum())
        return max(rp, rq)

    def to_json(self) -> dict:
        return {
            "rows": self.row_support.tolist(),
            "cols": self.col_support.tolist(),
            "mass": self.mass.tolist(),
        }


@dataclass(frozen=True, eq=False)
class TransportResult:
    """Optimal value (length^r units), the coupling achieving it, and method."""

    value: float
    coupling: Coupling
    method: str  # exact_lp | quantile_1d | sinkhorn_anneal
    r: float

    def recomputed_value(self) -> float:
        C = power_cost_matrix(self.coupling.row_support, self.coupling.col_support, self.r)
        return float(np.sum(self.coupling.mass * C))

    def to_json(self) -> dict:
        return {"value": self.value, "method": self.method, "r": self.r, **self.coupling.to_json()}


def _atoms_of(m) -> tuple[np.ndarray, np.ndarray]:
    """(points, weights) of a discrete measure or the midpoint atomisation of a grid."""
    if isinstance(m, DiscreteMeasure):
        return m.points, m.weights
    if isinstance(m, GridMeasure):
        return m.centers(), m.masses()
    raise TypeError(f"need a discrete or grid measure, got {type(m)!r}")


def solve_exact(P: DiscreteMeasure, Q: DiscreteMeasure, r: float) -> TransportResult:
    """Exact optimum of min sum mass_ij |x_i - y_j|^r over couplings of (P, Q).

    Two LP stages: HiGHS dual simplex for the optimal value, then a
    lexicographic objective restricted to the optimal face so that ties in
    the optimal basis break toward the lowest (i, j) index.  Single-atom
    inputs short-circuit to the product coupling (the unique feasible point).
    """
    if r < 1:
        raise ValueError("solve_exact requires r >= 1; the r < 1 regime has no monotone/LP optimality here")
    x, p = P.points, P.weights
    y, q = Q.points, Q.weights
    n, m = p.shape[0], q.shape[0]
    if n * m > EXACT_SIZE_LIMIT:
        raise SizeExceeded(f"support product {n * m} exceeds {EXACT_SIZE_LIMIT}")
    C = power_cost_matrix(x, y, r)

    if n == 1 or m == 1:
        mass = np.outer(p, q)
        value = float(np.sum(mass * C))
        return TransportResult(value, Coupling(x, y, mass), "exact_lp", r)

    A_eq = sp.vstack(
        [
            sp.kron(sp.eye(n, format="csr"), np.ones((1, m))),
            sp.kron(np.ones((1, n)), sp.eye(m, format="csr")),
        ]
    ).tocsr()
    b_eq = np.concatenate([p, q])
    c = C.ravel()

    stage1 = linprog(c, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs", options=_HIGHS_OPTS)
    if not stage1.success:
        raise NumericalFailure(f"exact LP failed: {stage1.message}")

    # lexicographic canonicalisation within the optimal face
    tie = (np.arange(n * m, dtype=float) + 1.0) / (n * m)
    slack = 1e-12 * (1.0 + abs(stage1.fun))
    stage2 = linprog(
        tie,
        A_ub=sp.csr_matrix(c),
        b_ub=[stage1.fun + slack],
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs",
        options=_HIGHS_OPTS,
    )
    xsol = stage2.x if stage2.success else stage1.x
    mass = np.clip(xsol.reshape(n, m), 0.0, None)
    value = float(np.sum(mass * C))
    return TransportResult(value, Coupling(x, y, mass), "exact_lp", r)


def solve_quantile_1d(P, Q, r: float) -> TransportResult:
    """Monotone rearrangement value int_0^1 |F_P^{-1} - F_Q^{-1}|^r du in 1-D.

    Computed exactly for step CDFs by merging the two cumulative-weight
    breakpoint sequences; the coupling is the monotone coupling on the atoms
    (grid cells enter at their centres with their cell masses).
    """
    if r < 1:
        raise ValueError("solve_quantile_1d requires r >= 1 (monotone coupling not optimal for concave cost)")
    x, p = _atoms_of(P)
    y, q = _atoms_of(Q)
    if x.shape[1] != 1 or y.shape[1] != 1:
        raise DimensionError("quantile coupling is one-dimensional only")

    ox = np.argsort(x[:, 0], kind="stable")
    oy = np.argsort(y[:, 0], kind="stable")
    xs, ps = x[ox], p[ox]
    ys, qs = y[oy], q[oy]
    cum_p = np.cumsum(ps)
    cum_q = np.cumsum(qs)
    cum_p[-1] = cum_q[-1] = 1.0

    breaks = np.unique(np.concatenate([[0.0], cum_p, cum_q]))
    seg_len = np.diff(breaks)
    mids = 0.5 * (breaks[:-1] + breaks[1:])
    i_idx = np.searchsorted(cum_p, mids, side="left")
    j_idx = np.searchsorted(cum_q, mids, side="left")

    mass = np.zeros((xs.shape[0], ys.shape[0]))
    np.add.at(mass, (i_idx, j_idx), seg_len)
    dist = np.abs(xs[i_idx, 0] - ys[j_idx, 0])
    cost = np.zeros_like(dist)
    nz = dist > 0.0
    cost[nz] = np.exp(r * np.log(dist[nz]))
    value = float(np.sum(seg_len * cost))
    return TransportResult(value, Coupling(xs, ys, mass), "quantile_1d", r)


def _smoothed_moments(P, kernel: TransitionKernel, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and per-axis std of the law of X^0(t) started from P."""
    v = kernel.transition_var(0.0, t)
    if isinstance(P, GaussianSpec):
        var0 = np.diag(P.covariance)
        if isinstance(kernel, OUKernel):
            decay = np.exp(-kernel.theta * t)
            return decay * P.mean, np.sqrt(decay**2 * var0 + v)
        return P.mean.copy(), np.sqrt(var0 + v)
    pts, w = _atoms_of(P)
    if isinstance(kernel, OUKernel):
        pts = np.exp(-kernel.theta * t) * pts
    mean = w @ pts
    var = w @ (pts - mean) ** 2 + v
    return np.atleast_1d(mean), np.sqrt(np.atleast_1d(var))


def heat_smoothed_marginal(
    P,
    kernel: TransitionKernel,
    t: float,
    grid: GridSpec | None = None,
    cells: int = 801,
    cover: float = 8.0,
) -> GridMeasure:
    """Density of the uncontrolled state at time t, y -> int p(0, x; t, y) P(dx).

    P may be discrete, grid (cells enter at their centres) or Gaussian.  The
    default grid covers `cover` standard deviations of the smoothed law; a
    supplied grid must cover at least 6.
    """
    if t <= 0:
        raise ValueError("need t > 0")
    mean, std = _smoothed_moments(P, kernel, t)
    if grid is None:
        grid = GridSpec.from_bounds(mean - cover * std, mean + cover * std, cells)
    else:
        lo, hi = mean - 6.0 * std, mean + 6.0 * std
        if np.any(grid.origin > lo + 1e-12) or np.any(grid.upper < hi - 1e-12):
            raise GridTooNarrow("supplied grid covers less than 6 sigma of the smoothed law")

    centers = grid.centers()
    if isinstance(P, GaussianSpec):
        v = kernel.transition_var(0.0, t)
        if isinstance(kernel, OUKernel):
            decay = np.exp(-kernel.theta * t)
            spec = GaussianSpec(decay * P.mean, decay**2 * P.covariance + v * np.eye(P.d))
        else:
            spec = GaussianSpec(P.mean, P.covariance + v * np.eye(P.d))
        dens = np.exp(spec.log_pdf(centers))
    else:
        pts, w = _atoms_of(P)
        logk = kernel.log_density_matrix(0.0, pts, t, centers)
        dens = w @ np.exp(logk)
    return GridMeasure(grid=grid, density=dens.reshape(grid.counts))


def cross_second_moment(P, Q) -> float:
    """int int |x - y|^2 P(dx) Q(dy) for independent marginals."""
    return float(moment_r(P, 2) + moment_r(Q, 2) - 2.0 * mean_of(P) @ mean_of(Q))
