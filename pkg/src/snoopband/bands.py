"""Uniform-in-bandwidth confidence bands and sensitivity queries."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import NotExcludedPointwise
from .gp_critval import (
    DEFAULT_GRID_PER_LOG,
    CritValRequest,
    CritValResult,
    GridSpec,
    _factor,
    _block_rng,
    _quantile_with_se,
    BLOCK_SIZE,
    critical_value,
    normal_critval,
)
from .kernels import KernelSpec, get_kernel

__all__ = [
    "EstimateCurve",
    "UniformBand",
    "CritValCurve",
    "KNOT_RATIOS",
    "RATIO_CAP",
    "uniform_band",
    "snooping_adjusted_ci",
    "sensitivity_ratio",
    "band_overlap_report",
    "critval_curve",
]

RATIO_CAP = 100.0
KNOT_RATIOS = (1.0, 1.25, 1.5, 2.0, 3.0, 4.0, 6.0, 10.0, 15.0, 25.0, 50.0, 100.0)
LOG_RATIO_TOL = 0.01


@dataclass(frozen=True)
class EstimateCurve:
    """Estimates ``theta_hat(h)`` and standard errors ``se(h)`` over a bandwidth grid."""

    h: np.ndarray
    theta_hat: np.ndarray
    se: np.ndarray
    kernel: str = "triangular"
    order: int = 1
    tag: str = ""
    n_eff_left: np.ndarray | None = None
    n_eff_right: np.ndarray | None = None

    def __post_init__(self):
        for name in ("h", "theta_hat", "se"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if not (self.h.shape == self.theta_hat.shape == self.se.shape) or self.h.size == 0:
            raise ValueError("h, theta_hat and se must be nonempty and of equal length")
        if np.any(np.diff(self.h) <= 0) or self.h[0] <= 0:
            raise ValueError("bandwidths must be positive and strictly increasing")
        if not np.all(self.se > 0):
            raise ValueError("standard errors must be positive")

    @property
    def ratio(self) -> float:
        return float(self.h[-1] / self.h[0])

    def __len__(self) -> int:
        return self.h.size


@dataclass(frozen=True)
class UniformBand:
    curve: EstimateCurve
    alpha: float
    sides: str
    critval: CritValResult
    lo: np.ndarray
    hi: np.ndarray
    lo_pw: np.ndarray
    hi_pw: np.ndarray

    def to_csv(self) -> str:
        c = self.curve
        lines = ["h,theta,se,lo_pw,hi_pw,lo_unif,hi_unif,n_eff_left,n_eff_right"]
        nl = c.n_eff_left if c.n_eff_left is not None else [""] * len(c)
        nr = c.n_eff_right if c.n_eff_right is not None else [""] * len(c)
        for i in range(len(c)):
            lines.append(",".join([repr(float(c.h[i])), repr(float(c.theta_hat[i])), repr(float(c.se[i])),
                                   repr(float(self.lo_pw[i])), repr(float(self.hi_pw[i])),
                                   repr(float(self.lo[i])), repr(float(self.hi[i])), str(nl[i]), str(nr[i])]))
        return "\n".join(lines) + "\n"


@dataclass
class CritValCurve:
    """Critical value as a monotone function of the bandwidth ratio.

    One simulation of the process on a log grid over ``[1, RATIO_CAP]``
    serves every knot: the supremum over ``[1, t]`` is a running maximum, so
    knots share random numbers and the knot values are nondecreasing by
    construction. Between knots a shape-preserving cubic in ``log t`` is used.
    """

    kernel: KernelSpec
    alpha: float
    sides: str
    knots: np.ndarray
    values: np.ndarray
    mc_se: np.ndarray
    n_reps: int
    seed: int
    grid_per_log: int
    _spline: PchipInterpolator = field(init=False, repr=False)

    def __post_init__(self):
        self.values = np.maximum.accumulate(self.values)
        self._spline = PchipInterpolator(np.log(self.knots), self.values)

    def __call__(self, ratio: float) -> float:
        if not ratio >= 1.0:
            raise ValueError("ratio must be >= 1")
        if ratio > self.knots[-1] * (1 + 1e-12):
            raise ValueError(f"ratio {ratio:g} exceeds the cached range {self.knots[-1]:g}")
        return float(self._spline(min(math.log(ratio), math.log(self.knots[-1]))))

    def result(self, ratio: float) -> CritValResult:
        value = self(ratio)
        se = float(np.interp(math.log(ratio), np.log(self.knots), self.mc_se))
        req = CritValRequest(self.kernel, ratio, self.alpha, self.sides, self.n_reps, self.grid_per_log, self.seed)
        return CritValResult(value, se, req, 0.0, 0)

    @classmethod
    def simulate(cls, kernel: KernelSpec, alpha: float = 0.05, sides: str = "two",
                 knots: Sequence[float] = KNOT_RATIOS, n_reps: int = 20_000, seed: int = 0,
                 grid_per_log: int = DEFAULT_GRID_PER_LOG) -> "CritValCurve":
        knots = np.asarray(sorted(knots), dtype=float)
        if knots[0] != 1.0:
            raise ValueError("the first knot must be ratio 1")
        grid = GridSpec.for_ratio(float(knots[-1]), grid_per_log)
        L = _factor(kernel, grid)
        # node index at or beyond each knot; nodes are uniform in log h
        stop = np.minimum(np.ceil(np.log(knots) / grid.log_step - 1e-9).astype(int), grid.n_points - 1)
        sups = []
        for block in range(-(-n_reps // BLOCK_SIZE)):
            m = min(BLOCK_SIZE, n_reps - block * BLOCK_SIZE)
            path = L @ _block_rng(seed, block).standard_normal((grid.n_points, m))
            if sides == "two":
                path = np.abs(path)
            running = np.maximum.accumulate(path, axis=0)
            sups.append(running[stop])
        draws = np.concatenate(sups, axis=1)
        vals, ses = zip(*(_quantile_with_se(row, 1 - alpha) for row in draws))
        return cls(kernel, alpha, sides, knots, np.array(vals), np.array(ses), n_reps, seed, grid_per_log)


_CURVES: dict = {}
_CURVES_LOCK = threading.Lock()


def critval_curve(kernel: KernelSpec, alpha: float = 0.05, sides: str = "two", n_reps: int = 20_000,
                  seed: int = 0, grid_per_log: int = DEFAULT_GRID_PER_LOG) -> CritValCurve:
    """Process-wide cached :class:`CritValCurve`."""
    key = (kernel.fingerprint(), kernel.support, alpha, sides, n_reps, seed, grid_per_log)
    with _CURVES_LOCK:
        if key not in _CURVES:
            _CURVES[key] = CritValCurve.simulate(kernel, alpha, sides, n_reps=n_reps, seed=seed,
                                                 grid_per_log=grid_per_log)
        return _CURVES[key]


def _resolve_critval(source, ratio: float, alpha: float, sides: str) -> CritValResult:
    if isinstance(source, CritValCurve):
        if source.alpha != alpha or source.sides != sides:
            raise ValueError("cached critical-value curve was built for a different alpha or sidedness")
        return source.result(ratio)
    if isinstance(source, CritValResult):
        return source
    if isinstance(source, CritValRequest):
        return critical_value(source)
    if isinstance(source, KernelSpec):
        return critical_value(CritValRequest(source, ratio, alpha, sides))
    raise TypeError("critval source must be a CritValCurve, CritValRequest, CritValResult or KernelSpec")


def uniform_band(curve: EstimateCurve, alpha: float = 0.05, sides: str = "two", critval_source=None,
                 seed: int = 0, n_reps: int = 20_000) -> UniformBand:
    """Pointwise and snooping-adjusted bands for ``curve``.

    ``critval_source`` may be a :class:`CritValCurve`, a request, a finished
    result, or a kernel; by default the equivalent kernel of the curve's
    kernel and order is simulated at the curve's ratio.
    """
    ratio = curve.ratio
    if critval_source is None:
        critval_source = CritValRequest(get_kernel(curve.kernel, curve.order), ratio, alpha, sides, n_reps, seed=seed)
    cv = _resolve_critval(critval_source, ratio, alpha, sides)
    z = normal_critval(alpha, sides)
    c = cv.value
    th, se = curve.theta_hat, curve.se
    if sides == "two":
        lo, hi, lo_pw, hi_pw = th - c * se, th + c * se, th - z * se, th + z * se
    else:
        inf = np.full_like(th, np.inf)
        lo, hi, lo_pw, hi_pw = th - c * se, inf, th - z * se, inf
    return UniformBand(curve, alpha, sides, cv, lo, hi, lo_pw, hi_pw)


def snooping_adjusted_ci(theta_hat: float, se: float, ratio: float, kernel, order: int = 0,
                         alpha: float = 0.05, sides: str = "two", critval: float | None = None,
                         n_reps: int = 20_000, seed: int = 0) -> tuple[float, float]:
    """Interval ``theta_hat -/+ c * se`` using the adjusted critical value at ``ratio``.

    For ``sides="one"`` the interval is ``[theta_hat - c se, inf)``. Pass
    ``critval`` to skip the simulation.
    """
    if not ratio >= 1.0:
        raise ValueError("ratio must be >= 1")
    if critval is None:
        k = get_kernel(kernel, order)
        critval = critical_value(CritValRequest(k, ratio, alpha, sides, n_reps, seed=seed)).value
    if sides == "two":
        return theta_hat - critval * se, theta_hat + critval * se
    return theta_hat - critval * se, math.inf


@dataclass(frozen=True)
class SensitivityResult:
    ratio: float
    unbounded: bool  # True when the value stays excluded up to the cap

    def __str__(self) -> str:
        return f"unbounded <= {self.ratio:g}" if self.unbounded else f"{self.ratio:.4g}"


def sensitivity_ratio(theta_hat: float, se: float, kernel, order: int = 0, alpha: float = 0.05,
                      sides: str = "two", excluded_value: float = 0.0,
                      curve: CritValCurve | None = None, cap: float = RATIO_CAP) -> SensitivityResult:
    """Largest ratio ``hbar/hlow`` at which the adjusted interval still excludes a value.

    Bisection in ``log t`` on the cached monotone critical-value curve.
    """
    if curve is None:
        curve = critval_curve(get_kernel(kernel, order), alpha, sides)
    stat = (theta_hat - excluded_value) / se
    if sides == "two":
        stat = abs(stat)
    if not stat > curve(1.0):
        raise NotExcludedPointwise(f"t-statistic {stat:.3f} does not exclude {excluded_value:g} even pointwise")
    if stat > curve(cap):
        return SensitivityResult(cap, True)
    lo, hi = 0.0, math.log(cap)
    while hi - lo > LOG_RATIO_TOL:
        mid = 0.5 * (lo + hi)
        if curve(math.exp(mid)) < stat:
            lo = mid
        else:
            hi = mid
    return SensitivityResult(math.exp(lo), False)


def band_overlap_report(band: UniformBand, h1: float, h2: float) -> dict:
    """Whether the adjusted intervals at the grid points nearest ``h1`` and ``h2`` intersect.

    ``gap`` is the distance between the intervals, negative when they overlap
    (then its magnitude is the length of the intersection).
    """
    h = band.curve.h
    i, j = int(np.argmin(np.abs(h - h1))), int(np.argmin(np.abs(h - h2)))
    gap = float(max(band.lo[i], band.lo[j]) - min(band.hi[i], band.hi[j]))
    return {"h1": float(h[i]), "h2": float(h[j]), "overlap": gap <= 0, "gap": gap}
