"""Static entropic projection onto couplings with fixed marginals.

Minimises H(mu | R) over couplings of two grid measures, where the reference
R pairs the first marginal with the kernel transition over horizon T.  The
solver is plain Sinkhorn (alternating marginal scaling) kept entirely in log
space, so reference entries never underflow however small the horizon.

Entropy conventions: entropy_S(q) = int q log q (negative differential
entropy, so N(0,1) gives about -1.419); relative entropy is in nats.  Grid
relative entropies use cell masses on both sides, so the log h^d
discretisation offsets cancel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import EntropyInfinite, NoInvariant, ShapeMismatch
from .kernels import OUKernel, TransitionKernel
from .measures import DiscreteMeasure, GridMeasure, moment_r
from .rng import STREAM_INIT, make_rng
from .transport import Coupling, cross_second_moment


@dataclass(frozen=True)
class EntropyValue:
    value: float
    finite: bool


def _masses_pair(mu, nu) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(mu, Coupling) and isinstance(nu, Coupling):
        if mu.mass.shape != nu.mass.shape:
            raise ShapeMismatch("couplings have different shapes")
        if not (np.array_equal(mu.row_support, nu.row_support) and np.array_equal(mu.col_support, nu.col_support)):
            raise ShapeMismatch("couplings live on different supports")
        return mu.mass.ravel(), nu.mass.ravel()
    if isinstance(mu, GridMeasure) and isinstance(nu, GridMeasure):
        if mu.grid.counts != nu.grid.counts or mu.grid.spacing != nu.grid.spacing or not np.array_equal(mu.grid.origin, nu.grid.origin):
            raise ShapeMismatch("grid measures live on different grids")
        return mu.masses(), nu.masses()
    if isinstance(mu, np.ndarray) and isinstance(nu, np.ndarray):
        if mu.shape != nu.shape:
            raise ShapeMismatch("mass arrays have different shapes")
        return mu.ravel(), nu.ravel()
    raise ShapeMismatch(f"cannot compare {type(mu)!r} with {type(nu)!r}")


def relative_entropy(mu, nu) -> EntropyValue:
    """H(mu | nu) = sum mu_i log(mu_i / nu_i) with 0 log 0 = 0; finite=False
    as soon as some mu_i > 0 sits on nu_i = 0 (absolute continuity fails)."""
    a, b = _masses_pair(mu, nu)
    pos = a > 0.0
    if np.any(b[pos] == 0.0):
        return EntropyValue(value=math.inf, finite=False)
    val = float(np.sum(a[pos] * (np.log(a[pos]) - np.log(b[pos]))))
    return EntropyValue(value=val, finite=True)


def entropy_S(q: GridMeasure) -> EntropyValue:
    """int q(x) log q(x) dx by midpoint rule on the grid (density, not mass)."""
    dens = q.density.ravel()
    pos = dens > 0.0
    val = float(np.sum(dens[pos] * np.log(dens[pos])) * q.grid.cell_volume)
    return EntropyValue(value=val, finite=True)


@dataclass(frozen=True, eq=False)
class SchrodingerSolution:
    """Entropic projection of the reference onto the marginal polytope.

    phi1 lives on Q's grid (terminal potential), phi2 on P's grid (initial
    potential), gauged so that int phi2 dP = 0.  The factorisation
    mass_ij = exp(-phi1_j - phi2_i) p(0, x_i; T, y_j) P_i Q_j dx dy
    holds to machine precision by construction.
    """

    coupling: Coupling
    value: float
    phi1: np.ndarray
    phi2: np.ndarray
    iterations: int
    marginal_residual: float
    converged: bool
    residual_history: tuple = field(default=())
    log_reference: np.ndarray | None = None

    def reference_masses(self) -> np.ndarray:
        return np.exp(self.log_reference)


def _marginal_l1(log_mu: np.ndarray, logp: np.ndarray, logq: np.ndarray) -> float:
    rows = np.exp(logsumexp(log_mu, axis=1))
    cols = np.exp(logsumexp(log_mu, axis=0))
    return max(float(np.abs(rows - np.exp(logp)).sum()), float(np.abs(cols - np.exp(logq)).sum()))


def sinkhorn_solve(
    P: GridMeasure,
    Q: GridMeasure,
    kernel: TransitionKernel,
    T: float,
    tol: float = 1e-9,
    max_iter: int = 50_000,
    init: str = "zero",
    seed: int = 0,
    residual_every: int = 10,
) -> SchrodingerSolution:
    """Alternating row/column scaling of R_ij = P_i p(0, x_i; T, y_j) dVol(Q),
    in log domain, until the max marginal L1 residual is <= tol (or max_iter,
    in which case the best iterate is returned with converged=False)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    xs, ys = P.centers(), Q.centers()
    p_mass, q_mass = P.masses(), Q.masses()
    logp = np.log(p_mass)
    logq = np.log(q_mass)
    log_ref = logp[:, None] + kernel.log_density_matrix(0.0, xs, T, ys) + math.log(Q.grid.cell_volume)

    if init == "zero":
        f = np.zeros_like(logp)
        g = np.zeros_like(logq)
    elif init == "random":
        rng = make_rng(seed, STREAM_INIT)
        f = rng.standard_normal(logp.shape[0])
        g = rng.standard_normal(logq.shape[0])
    else:
        raise ValueError(f"unknown init {init!r}")

    history = []
    iterations = 0
    residual = math.inf
    for it in range(1, max_iter + 1):
        f = logp - logsumexp(log_ref + g[None, :], axis=1)
        g = logq - logsumexp(log_ref + f[:, None], axis=0)
        residual = _marginal_l1(log_ref + f[:, None] + g[None, :], logp, logq)
        iterations = it
        if it % residual_every == 0:
            history.append((it, residual))
        if residual <= tol:
            break
    converged = residual <= tol
    if not history or history[-1][0] != iterations:
        history.append((iterations, residual))

    log_mu = log_ref + f[:, None] + g[None, :]
    mu = np.exp(log_mu)
    # value = sum mu (log mu - log R) = sum mu (f + g); exact identity, no underflow
    value = float(mu.sum(axis=1) @ f + mu.sum(axis=0) @ g)

    phi2 = -f
    phi1 = logq - g - math.log(Q.grid.cell_volume)
    gauge = float(phi2 @ p_mass)
    phi2 = phi2 - gauge
    phi1 = phi1 + gauge

    coupling = Coupling(row_support=xs, col_support=ys, mass=mu / mu.sum())
    return SchrodingerSolution(
        coupling=coupling,
        value=value,
        phi1=phi1,
        phi2=phi2,
        iterations=iterations,
        marginal_residual=residual,
        converged=converged,
        residual_history=tuple(history),
        log_reference=log_ref,
    )


@dataclass(frozen=True)
class SweepEntry:
    t: float
    value: float
    t_value: float
    iterations: int
    residual: float
    converged: bool


def schrodinger_value_sweep(P, Q, kernel, ts, **solver_kw) -> list[SweepEntry]:
    """One sinkhorn_solve per horizon; reports both v(t) and t v(t)."""
    ts = list(ts)
    if any(t <= 0 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("ts must be positive and increasing")
    out = []
    for t in ts:
        sol = sinkhorn_solve(P, Q, kernel, t, **solver_kw)
        out.append(
            SweepEntry(
                t=t,
                value=sol.value,
                t_value=t * sol.value,
                iterations=sol.iterations,
                residual=sol.marginal_residual,
                converged=sol.converged,
            )
        )
    return out


def schrodinger_upper_rhs(t: float, P, Q, c_tilde: float, d: int) -> float:
    """Upper bound on v(t):  [c ∫|x-y|^2 dP dQ + t S(Q) + t log(c t^{d/2})] / t.

    Requires a density for Q (S(Q) finite); discrete Q raises EntropyInfinite.
    """
    if isinstance(Q, DiscreteMeasure):
        raise EntropyInfinite("S(Q) is infinite for purely atomic Q")
    s_q = entropy_S(Q)
    if not s_q.finite:
        raise EntropyInfinite("S(Q) not finite on this grid")
    cross = cross_second_moment(P, Q)
    return (c_tilde * cross) / t + s_q.value + math.log(c_tilde * t ** (d / 2.0))


def schrodinger_lower_rhs(
    t: float, T2: float, lambda_sup: float, sigma_sup: float, xi_sup: float, eps: float
) -> float:
    """Lower bound on v(t) from the quadratic-cost comparison:
    [ (1-e)^2 T2 - e^{-1}(1-e)^2 sigma^2 t - e^{-1}(1-e) xi^2 t^2 ] / (2 lambda t).
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    inner = (
        (1 - eps) ** 2 * T2
        - (1 - eps) ** 2 * sigma_sup**2 * t / eps
        - (1 - eps) * xi_sup**2 * t**2 / eps
    )
    return inner / (2.0 * lambda_sup * t)


@dataclass(frozen=True)
class LongtimeRow:
    t: float
    v_value: float
    h_pxq_mu: float
    tv: float
    h_q_m: float
    iterations: int
    residual: float
    ckp_ok: bool


def longtime_limits(P: GridMeasure, Q: GridMeasure, kernel: OUKernel, ts, **solver_kw) -> list[LongtimeRow]:
    """Long-horizon diagnostics: per t, H(PxQ | mu_t), the total-variation
    distance ||mu_t - PxQ||_TV (half L1 on the grid), v(t) and H(Q | m).

    The CKP relation TV <= sqrt(2 H) is recorded per row; it is an exact
    inequality for the grid masses.
    """
    if not isinstance(kernel, OUKernel):
        raise NoInvariant("long-time limits need an ergodic (OU) kernel")
    m_grid = invariant_on_grid(kernel, Q)
    h_q_m = relative_entropy(Q, m_grid).value
    pxq = np.outer(P.masses(), Q.masses())
    rows = []
    for t in ts:
        sol = sinkhorn_solve(P, Q, kernel, t, **solver_kw)
        h = relative_entropy(pxq, sol.coupling.mass).value
        tv = 0.5 * float(np.abs(sol.coupling.mass - pxq).sum())
        rows.append(
            LongtimeRow(
                t=t,
                v_value=sol.value,
                h_pxq_mu=h,
                tv=tv,
                h_q_m=h_q_m,
                iterations=sol.iterations,
                residual=sol.marginal_residual,
                ckp_ok=tv <= math.sqrt(2.0 * h) + 1e-9,
            )
        )
    return rows


def invariant_on_grid(kernel: OUKernel, Q: GridMeasure) -> GridMeasure:
    """Invariant density discretised on Q's own grid (for H(Q | m))."""
    spec = kernel.invariant_spec()
    dens = np.exp(spec.log_pdf(Q.centers()))
    return GridMeasure(grid=Q.grid, density=dens.reshape(Q.grid.counts))


def fit_longtime_constant(values, P, Q) -> float:
    """Smallest constant on the ladder {1, 2, 4, ...} making
    S(Q) + C (1 + int |x|^2 (P + Q)) an upper bound for the computed sweep.
    An empirical certificate, not the proof's constant."""
    s_q = entropy_S(Q).value
    m2 = moment_r(P, 2) + moment_r(Q, 2)
    top = max(values)
    c = 1.0
    while s_q + c * (1.0 + m2) < top:
        c *= 2.0
        if c > 1e12:
            raise RuntimeError("long-time ladder failed to cap the sweep")
    return c


def upper_bound_longtime_rhs(Q: GridMeasure, P, c_bar: float) -> float:
    """S(Q) + C (1 + int |x|^2 (P(dx) + Q(dx))) with a supplied constant."""
    return entropy_S(Q).value + c_bar * (1.0 + moment_r(P, 2) + moment_r(Q, 2))
