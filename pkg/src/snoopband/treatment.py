"""LATE on the largest complier windows, and trimmed average treatment effects."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bands import EstimateCurve, UniformBand, uniform_band
from .errors import EmptyTrimSet, NoFirstStage, OverlappingWindows
from .gp_critval import CritValRequest, critical_value, normal_critval
from .kernels import get_kernel

__all__ = [
    "LateSample",
    "AteSample",
    "late_estimate",
    "late_iv",
    "late_band",
    "trim_that",
    "ate_trim_estimates",
    "ate_trim_band",
    "ate_band_from_summaries",
    "AteTrimBand",
]

MIN_FIRST_STAGE = 1e-6


@dataclass(frozen=True)
class LateSample:
    """Instrument ``z``, treatment ``d`` and outcome ``y``; support defaults to the sample range."""

    z: np.ndarray
    d: np.ndarray
    y: np.ndarray
    z_lo: float | None = None
    z_hi: float | None = None

    def __post_init__(self):
        for name in ("z", "d", "y"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.z.shape == self.d.shape == self.y.shape):
            raise ValueError("z, d and y must have equal length")
        if not all(np.all(np.isfinite(getattr(self, k))) for k in ("z", "d", "y")):
            raise ValueError("data must be finite")
        if self.z_lo is None:
            object.__setattr__(self, "z_lo", float(self.z.min()))
        if self.z_hi is None:
            object.__setattr__(self, "z_hi", float(self.z.max()))

    def windows(self, h: float) -> tuple[np.ndarray, np.ndarray]:
        if not self.z_lo + h < self.z_hi - h:
            raise OverlappingWindows(f"h={h:g} makes the lower and upper instrument windows overlap")
        low = self.z <= self.z_lo + h
        high = self.z >= self.z_hi - h
        return low, high


@dataclass(frozen=True)
class AteSample:
    y: np.ndarray
    d: np.ndarray
    e: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray

    def __post_init__(self):
        for name in ("y", "d", "e", "mu0", "mu1"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        eps = np.finfo(float).eps
        if np.any(self.e <= eps) or np.any(self.e >= 1 - eps):
            raise ValueError("propensity scores must lie strictly inside (0, 1)")
        if not np.all(np.isin(self.d, (0.0, 1.0))):
            raise ValueError("treatment must be binary")

    @property
    def tilde_y(self) -> np.ndarray:
        """Doubly robust score whose mean over a trimmed set is the trimmed ATE."""
        d, e = self.d, self.e
        return (d * (self.y - self.mu1) / e - (1 - d) * (self.y - self.mu0) / (1 - e)
                + self.mu1 - self.mu0)

    @property
    def n(self) -> int:
        return self.y.size


def late_estimate(data: LateSample, h: float) -> tuple[float, float, int]:
    """Ratio of window-mean differences, with a heteroskedasticity-robust IV standard error.

    Returns ``(theta_hat, se, n_eff)`` where ``n_eff`` counts units in either window.
    """
    low, high = data.windows(h)
    if not low.any() or not high.any():
        raise NoFirstStage(f"an instrument window is empty at h={h:g}")
    first = data.d[high].mean() - data.d[low].mean()
    if abs(first) <= MIN_FIRST_STAGE:
        raise NoFirstStage(f"treatment rates in the two windows differ by {first:.3g} at h={h:g}")
    theta = (data.y[high].mean() - data.y[low].mean()) / first
    _, se = late_iv(data, h)
    return float(theta), se, int(low.sum() + high.sum())


def late_iv(data: LateSample, h: float) -> tuple[float, float]:
    """Just-identified IV of ``y`` on ``(1, d)`` with instrument ``(1, 1(z >= z_hi - h))``.

    Uses the pooled window sample and the HC0 sandwich. Returns the slope and its standard error.
    """
    low, high = data.windows(h)
    keep = low | high
    y = data.y[keep]
    X = np.column_stack([np.ones(y.size), data.d[keep]])
    Z = np.column_stack([np.ones(y.size), high[keep].astype(float)])
    ZX = Z.T @ X
    beta = np.linalg.solve(ZX, Z.T @ y)
    u = y - X @ beta
    ZXinv = np.linalg.inv(ZX)
    meat = (Z * u[:, None] ** 2).T @ Z
    V = ZXinv @ meat @ ZXinv.T
    return float(beta[1]), float(math.sqrt(V[1, 1]))


def late_band(data: LateSample, h_grid: Sequence[float], alpha: float = 0.05, sides: str = "two",
              seed: int = 0, n_reps: int = 20_000) -> UniformBand:
    """Uniform band over ``h_grid`` using the uniform-kernel critical value."""
    h_grid = np.sort(np.asarray(h_grid, dtype=float))
    est = [late_estimate(data, h) for h in h_grid]
    counts = np.array([[w.sum() for w in data.windows(h)] for h in h_grid])
    curve = EstimateCurve(h_grid, [e[0] for e in est], [e[1] for e in est], "uniform", 0, "late",
                          counts[:, 0], counts[:, 1])
    return uniform_band(curve, alpha, sides, seed=seed, n_reps=n_reps)


def trim_that(se_lo: float, n_lo: float, se_hi: float, n_hi: float) -> float:
    """Variance ratio ``se(h_lo)^2 N(h_lo)^2 / (se(h_hi)^2 N(h_hi)^2)``.

    Values below one signal that the sample variance is not monotone in the
    trimming level; a warning is issued and the value returned unchanged.
    """
    if min(se_lo, n_lo, se_hi, n_hi) <= 0:
        raise ValueError("standard errors and counts must be positive")
    t = (se_lo * n_lo) ** 2 / (se_hi * n_hi) ** 2
    if t < 1:
        warnings.warn(f"t_hat={t:.4g} < 1: estimated variance is not monotone in the trimming level",
                      stacklevel=2)
    return float(t)


def ate_trim_estimates(data: AteSample, h_values: Sequence[float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``theta_hat(h)``, ``se(h)`` and ``N(h)`` for each trimming level ``h``."""
    ty = data.tilde_y
    th, se, cnt = [], [], []
    for h in h_values:
        if not 0 <= h < 0.5:
            raise ValueError("trimming levels must lie in [0, 0.5)")
        inside = (data.e >= h) & (data.e <= 1 - h)
        N = int(inside.sum())
        if N == 0:
            raise EmptyTrimSet(f"no propensity scores in [{h:g}, {1 - h:g}]")
        m = ty[inside].mean()
        th.append(m)
        se.append(math.sqrt(np.sum((ty[inside] - m) ** 2)) / N)
        cnt.append(N)
    return np.array(th), np.array(se), np.array(cnt)


@dataclass(frozen=True)
class AteTrimBand:
    h: np.ndarray
    theta_hat: np.ndarray
    se: np.ndarray
    n: np.ndarray
    t_hat: float
    critval: float
    mc_se: float
    lo: np.ndarray
    hi: np.ndarray
    lo_pw: np.ndarray
    hi_pw: np.ndarray

    def to_csv(self) -> str:
        lines = [f"# t_hat={self.t_hat!r} critval={self.critval!r}",
                 "h,theta,se,lo_pw,hi_pw,lo_unif,hi_unif,n"]
        for i in range(self.h.size):
            vals = (self.h[i], self.theta_hat[i], self.se[i], self.lo_pw[i], self.hi_pw[i], self.lo[i], self.hi[i])
            lines.append(",".join(repr(float(v)) for v in vals) + f",{int(self.n[i])}")
        return "\n".join(lines) + "\n"


def ate_band_from_summaries(h, theta_hat, se, n, alpha: float = 0.05, critval: float | None = None,
                            n_reps: int = 20_000, seed: int = 0, grid_per_log: int | None = None) -> AteTrimBand:
    """Band from per-level summaries ``(theta_hat, se, N)``, ordered by increasing ``h``.

    The critical value is the two-sided uniform-kernel value at ``t_hat``,
    computed from the smallest and largest trimming levels.
    """
    h, theta_hat, se, n = (np.asarray(v, dtype=float) for v in (h, theta_hat, se, n))
    order = np.argsort(h)
    h, theta_hat, se, n = h[order], theta_hat[order], se[order], n[order]
    t_hat = trim_that(se[0], n[0], se[-1], n[-1])
    mc_se = 0.0
    if critval is None:
        kw = {} if grid_per_log is None else {"grid_per_log": grid_per_log}
        res = critical_value(CritValRequest(get_kernel("uniform", 0), max(t_hat, 1.0), alpha, "two",
                                            n_reps, seed=seed, **kw))
        critval, mc_se = res.value, res.mc_se
    z = normal_critval(alpha, "two")
    return AteTrimBand(h, theta_hat, se, n, t_hat, float(critval), mc_se,
                       theta_hat - critval * se, theta_hat + critval * se,
                       theta_hat - z * se, theta_hat + z * se)


def ate_trim_band(data: AteSample, h_values: Sequence[float] | None = None, alpha: float = 0.05,
                  h_lo: float = 0.0, h_hi: float = 0.1, grid: int = 21, **kw) -> AteTrimBand:
    """Uniform band for trimmed ATEs over trimming levels (21 evenly spaced by default)."""
    if h_values is None:
        h_values = np.linspace(h_lo, h_hi, grid)
    h_values = np.asarray(h_values, dtype=float)
    if np.any(np.diff(h_values) <= 0):
        raise ValueError("trimming levels must be strictly increasing")
    th, se, cnt = ate_trim_estimates(data, h_values)
    return ate_band_from_summaries(h_values, th, se, cnt, alpha, **kw)
