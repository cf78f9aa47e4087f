"""Closed-form Gaussian transition densities and empirical Aronson constants.

Two kernel families are supported, both with Gaussian transitions in closed
form: space-homogeneous heat kernels (sigma constant or a function of time)
and the Ornstein-Uhlenbeck kernel with drift -theta x, which has the
invariant density N(0, sigma^2/(2 theta) I).  Densities are evaluated in log
space so downstream solvers never underflow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy.integrate import fixed_quad

from .errors import FitFailed, NoInvariant, TimeOrder
from .measures import GaussianSpec, GridMeasure, GridSpec, discretize_gaussian
from .rng import STREAM_PROBES, make_rng

LADDER_FACTOR = 1.05
LADDER_CAP = 1e6


def _check_times(s: float, t: float) -> float:
    if s >= t:
        raise TimeOrder(f"need s < t, got s={s}, t={t}")
    return t - s


class TransitionKernel:
    """Common interface: log transition densities and Gaussian step moments."""

    variant: str
    d: int

    def transition_var(self, s: float, t: float) -> float:
        """Per-axis variance of the transition law from time s to t."""
        raise NotImplementedError

    def transition_mean(self, s: float, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def log_density(self, s: float, x, t: float, y) -> np.ndarray:
        """log p(s, x; t, y) for a single x and one or many y."""
        tau = _check_times(s, t)
        del tau
        x = np.asarray(x, dtype=float).reshape(1, self.d)
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if y.shape[1] != self.d:
            y = y.reshape(-1, self.d)
        v = self.transition_var(s, t)
        mean = self.transition_mean(s, x, t)
        sq = np.sum((y - mean) ** 2, axis=1)
        return -0.5 * sq / v - 0.5 * self.d * np.log(2 * np.pi * v)

    def density(self, s: float, x, t: float, y) -> np.ndarray:
        return np.exp(self.log_density(s, x, t, y))

    def log_density_matrix(self, s: float, xs: np.ndarray, t: float, ys: np.ndarray) -> np.ndarray:
        """(n, m) matrix of log p(s, x_i; t, y_j)."""
        _check_times(s, t)
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        v = self.transition_var(s, t)
        means = self.transition_mean(s, xs, t)
        diff = means[:, None, :] - ys[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        return -0.5 * sq / v - 0.5 * self.d * np.log(2 * np.pi * v)

    def scale(self, T: float) -> float:
        """Length scale of the transition law over horizon T (probe boxes)."""
        return math.sqrt(self.transition_var(0.0, T))

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class HeatKernel(TransitionKernel):
    """Driftless kernel dX = sigma(t) dB; transition N(x, int_s^t sigma^2 du I).

    sigma may be a positive scalar or a callable t -> scalar (isotropic,
    constant in space per the constant-sigma assumption this package works
    under).
    """

    sigma: Union[float, Callable[[float], float]]
    d: int = 1
    variant: str = "heat"

    def __post_init__(self):
        if not callable(self.sigma) and self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.d not in (1, 2):
            raise ValueError("d must be 1 or 2")

    def sigma_at(self, t: float) -> float:
        return float(self.sigma(t)) if callable(self.sigma) else float(self.sigma)

    def transition_var(self, s: float, t: float) -> float:
        _check_times(s, t)
        if not callable(self.sigma):
            return float(self.sigma) ** 2 * (t - s)
        val, _ = fixed_quad(lambda u: np.asarray([self.sigma_at(ui) ** 2 for ui in np.atleast_1d(u)]), s, t, n=64)
        return float(val)

    def transition_mean(self, s: float, x: np.ndarray, t: float) -> np.ndarray:
        return np.atleast_2d(np.asarray(x, dtype=float))

    def sigma_sup(self, T: float) -> float:
        if not callable(self.sigma):
            return float(self.sigma)
        return float(max(self.sigma_at(u) for u in np.linspace(0.0, T, 257)))

    def to_json(self) -> dict:
        if callable(self.sigma):
            raise ValueError("time-dependent sigma has no JSON form")
        return {"variant": "heat", "sigma": float(self.sigma), "d": self.d}


@dataclass(frozen=True, eq=False)
class OUKernel(TransitionKernel):
    """dX = -theta X dt + sigma dB; transition N(e^{-theta tau} x, v(tau) I)
    with v(tau) = sigma^2 (1 - e^{-2 theta tau}) / (2 theta).

    The drift satisfies <xi(x), x> = -theta |x|^2, so the confinement
    condition holds for every level r with M = sqrt(r / theta).
    """

    theta: float
    sigma: float
    d: int = 1
    variant: str = "ou"

    def __post_init__(self):
        if self.theta <= 0 or self.sigma <= 0:
            raise ValueError("theta and sigma must be positive")
        if self.d not in (1, 2):
            raise ValueError("d must be 1 or 2")

    def transition_var(self, s: float, t: float) -> float:
        tau = _check_times(s, t)
        return self.sigma**2 * (1.0 - math.exp(-2.0 * self.theta * tau)) / (2.0 * self.theta)

    def transition_mean(self, s: float, x: np.ndarray, t: float) -> np.ndarray:
        tau = t - s
        return math.exp(-self.theta * tau) * np.atleast_2d(np.asarray(x, dtype=float))

    @property
    def invariant_std(self) -> float:
        return self.sigma / math.sqrt(2.0 * self.theta)

    def invariant_spec(self) -> GaussianSpec:
        v = self.invariant_std**2
        return GaussianSpec(mean=np.zeros(self.d), covariance=v * np.eye(self.d))

    def scale(self, T: float) -> float:
        return max(math.sqrt(self.transition_var(0.0, T)), self.invariant_std)

    def sigma_sup(self, T: float) -> float:
        return float(self.sigma)

    def to_json(self) -> dict:
        return {"variant": "ou", "theta": self.theta, "sigma": self.sigma, "d": self.d}


def kernel_from_json(spec: dict) -> TransitionKernel:
    variant = spec.get("variant")
    if variant == "heat":
        return HeatKernel(sigma=float(spec["sigma"]), d=int(spec.get("d", 1)))
    if variant == "ou":
        return OUKernel(theta=float(spec["theta"]), sigma=float(spec["sigma"]), d=int(spec.get("d", 1)))
    raise ValueError(f"unknown kernel variant {variant!r}")


def transition_density(k: TransitionKernel, s: float, x, t: float, y) -> np.ndarray:
    """p(s, x; t, y); raises TimeOrder when s >= t."""
    return k.density(s, x, t, y)


def invariant_density(k: TransitionKernel, cells: int = 801, cover: float = 8.0) -> GridMeasure:
    """Invariant probability density as a grid measure (OU only)."""
    if not isinstance(k, OUKernel):
        raise NoInvariant(f"kernel variant {k.variant!r} has no invariant density")
    spec = k.invariant_spec()
    std = spec.std_axes()
    grid = GridSpec.from_bounds(spec.mean - cover * std, spec.mean + cover * std, cells)
    return discretize_gaussian(spec, grid)


@dataclass(frozen=True)
class AronsonFit:
    """Certified two-sided Gaussian sandwich constant on a probe set.

    residual is the worst log-space violation of either inequality at the
    certified constant; the fit guarantees residual <= 0.
    """

    c_tilde: float
    horizon: float
    residual: float
    probes: int
    seed: int
    ladder_step: int


def _sandwich_margins(logp, tau, sq, d, c):
    # upper: log p <= log c - (d/2) log tau - sq/(c tau)
    # lower: log p >= -log c - (d/2) log tau - c sq/tau
    logup = math.log(c) - 0.5 * d * np.log(tau) - sq / (c * tau)
    loglo = -math.log(c) - 0.5 * d * np.log(tau) - c * sq / tau
    return np.maximum(logp - logup, loglo - logp)


def aronson_fit(k: TransitionKernel, T: float, probes: int, seed: int) -> AronsonFit:
    """Smallest constant on the ladder {1, 1.05, 1.05^2, ...} for which the
    two-sided Gaussian sandwich holds at every probe (s, x, t, y).

    Probes are uniform over [0, T] x [-L, L]^{2d} with L = 5 x kernel scale
    at horizon T.  A probe-set certificate, not a global proof.
    """
    if probes < 1000:
        raise ValueError("need at least 10^3 probes")
    rng = make_rng(seed, STREAM_PROBES)
    L = 5.0 * k.scale(T)
    times = rng.random((probes, 2)) * T
    s = times.min(axis=1)
    t = times.max(axis=1)
    tau = np.maximum(t - s, 1e-9 * T)
    x = rng.random((probes, k.d)) * 2 * L - L
    y = rng.random((probes, k.d)) * 2 * L - L

    # log p at each probe (vectorised; isotropic Gaussian transitions)
    v = np.array([k.transition_var(si, si + taui) for si, taui in zip(s, tau)])
    means = np.vstack([k.transition_mean(si, xi, si + taui) for si, xi, taui in zip(s, x, tau)])
    sq_trans = np.sum((y - means) ** 2, axis=1)
    logp = -0.5 * sq_trans / v - 0.5 * k.d * np.log(2 * np.pi * v)
    sq = np.sum((x - y) ** 2, axis=1)

    step = 0
    c = 1.0
    while c <= LADDER_CAP:
        margins = _sandwich_margins(logp, tau, sq, k.d, c)
        worst = float(margins.max())
        if worst <= 0.0:
            return AronsonFit(c_tilde=c, horizon=T, residual=worst, probes=probes, seed=seed, ladder_step=step)
        step += 1
        c = LADDER_FACTOR**step
    raise FitFailed(f"no constant <= {LADDER_CAP:g} certifies the sandwich on the probe set")


def invariant_sandwich_margin(k: OUKernel, fit: AronsonFit, probes: int, seed: int) -> float:
    """Worst log-space violation of the invariant-density sandwich
    c T^{-d/2} >= m(y) >= 2^{-d} c^{-2(d+2)} exp(-2c|y|^2/T) m(0)
    on uniform probes; <= 0 means the certificate extends to m."""
    if not isinstance(k, OUKernel):
        raise NoInvariant("invariant sandwich needs an OU kernel")
    rng = make_rng(seed, STREAM_PROBES + 1)
    L = 5.0 * k.scale(fit.horizon)
    y = rng.random((probes, k.d)) * 2 * L - L
    v = k.invariant_std**2
    log_m = -0.5 * np.sum(y * y, axis=1) / v - 0.5 * k.d * math.log(2 * math.pi * v)
    log_m0 = -0.5 * k.d * math.log(2 * math.pi * v)
    c, T, d = fit.c_tilde, fit.horizon, k.d
    log_upper = math.log(c) - 0.5 * d * math.log(T)
    log_lower = -d * math.log(2.0) - 2 * (d + 2) * math.log(c) - 2 * c * np.sum(y * y, axis=1) / T + log_m0
    viol_up = log_m - log_upper
    viol_lo = log_lower - log_m
    return float(np.maximum(viol_up, viol_lo).max())
