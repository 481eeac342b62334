"""Critical values from the supremum of the limiting Gaussian process.

The process ``H(h)`` on ``[1, t]`` has unit variance and correlation
``sqrt(a) * int k(a u) k(u) du / int k^2`` between bandwidths ``a h`` and ``h``.
It is stationary in ``log h``, so it is simulated on a log-uniform grid from
the Cholesky factor of its Toeplitz covariance.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm
from scipy.stats.mstats import mjci

from .errors import CholeskyFailure, DomainError
from .kernels import KernelSpec, ev_constants, get_kernel, gp_correlation

__all__ = [
    "GridSpec",
    "CritValRequest",
    "CritValResult",
    "CritValTable",
    "build_covariance",
    "simulate_sup",
    "critical_value",
    "ev_approx_critval",
    "uncorrected_coverage",
    "normal_critval",
    "emit_table",
    "TABLE1_RATIOS",
]

DEFAULT_GRID_PER_LOG = 300
MIN_GRID_POINTS = 50
BLOCK_SIZE = 2048
JITTERS = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)

TABLE1_RATIOS = (1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 20.0, 50.0, 100.0)


@dataclass(frozen=True)
class GridSpec:
    """Log-uniform bandwidth grid ``origin * [1, t]``.

    A ratio of exactly 1 gives the degenerate single-node grid.
    """

    ratio_t: float
    n_points: int
    origin: float = 1.0

    def __post_init__(self):
        if not self.ratio_t >= 1.0:
            raise ValueError("ratio must be >= 1")
        if self.ratio_t > 1.0 and self.n_points < 2:
            raise ValueError("a nondegenerate grid needs at least 2 points")
        if self.origin <= 0:
            raise ValueError("grid origin must be positive")

    @classmethod
    def for_ratio(cls, ratio_t: float, per_log: int = DEFAULT_GRID_PER_LOG,
                  min_points: int = MIN_GRID_POINTS, origin: float = 1.0) -> "GridSpec":
        if ratio_t == 1.0:
            return cls(1.0, 1, origin)
        n = max(min_points, math.ceil(per_log * math.log(ratio_t)) + 1)
        return cls(float(ratio_t), n, origin)

    @property
    def log_step(self) -> float:
        return 0.0 if self.n_points == 1 else math.log(self.ratio_t) / (self.n_points - 1)

    @property
    def nodes(self) -> np.ndarray:
        if self.n_points == 1:
            return np.array([self.origin])
        nodes = self.origin * np.exp(self.log_step * np.arange(self.n_points))
        nodes[0] = self.origin
        nodes[-1] = self.origin * self.ratio_t
        return nodes


@dataclass(frozen=True)
class CritValRequest:
    kernel: KernelSpec
    ratio_t: float
    alpha: float = 0.05
    sides: str = "two"
    n_reps: int = 20_000
    grid_per_log: int = DEFAULT_GRID_PER_LOG
    seed: int = 0

    def __post_init__(self):
        if not self.ratio_t >= 1.0:
            raise ValueError("ratio must be >= 1")
        if not (0.0 < self.alpha <= 0.5):
            raise ValueError("alpha must lie in (0, 0.5]")
        if self.sides not in ("one", "two"):
            raise ValueError("sides must be 'one' or 'two'")
        if self.n_reps < 2:
            raise ValueError("need at least 2 replications")

    @property
    def grid(self) -> GridSpec:
        return GridSpec.for_ratio(self.ratio_t, self.grid_per_log)


@dataclass(frozen=True)
class CritValResult:
    value: float
    mc_se: float
    request: CritValRequest
    elapsed: float = field(default=0.0, compare=False)
    n_points: int = 0


@lru_cache(maxsize=64)
def _lag_correlations(kernel: KernelSpec, n_points: int, log_step: float) -> np.ndarray:
    return np.array([gp_correlation(kernel, math.exp(-d * log_step)) for d in range(n_points)])


def build_covariance(kernel: KernelSpec, grid: GridSpec) -> np.ndarray:
    """Covariance of ``H`` on the grid nodes.

    Entries depend only on the lag in ``log h``, so ``Sigma[i, j]`` equals the
    correlation at ratio ``min(h_i, h_j) / max(h_i, h_j)``.
    """
    rho = _lag_correlations(kernel, grid.n_points, grid.log_step)
    lags = np.abs(np.subtract.outer(np.arange(grid.n_points), np.arange(grid.n_points)))
    return rho[lags]


def _cholesky(sigma: np.ndarray) -> np.ndarray:
    eye = np.eye(sigma.shape[0])
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(sigma + jitter * eye if jitter else sigma)
        except np.linalg.LinAlgError:
            continue
    raise CholeskyFailure(
        f"covariance of size {sigma.shape[0]} not factorizable with jitter up to {JITTERS[-1]:g}"
    )


@lru_cache(maxsize=16)
def _factor(kernel: KernelSpec, grid: GridSpec) -> np.ndarray:
    return _cholesky(build_covariance(kernel, grid))


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block,))))


def _simulate_both(kernel: KernelSpec, grid: GridSpec, n_reps: int, seed: int,
                   threads: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    L = _factor(kernel, grid)
    n_blocks = -(-n_reps // BLOCK_SIZE)

    def run(block: int):
        m = min(BLOCK_SIZE, n_reps - block * BLOCK_SIZE)
        z = _block_rng(seed, block).standard_normal((grid.n_points, m))
        h = L @ z
        return h.max(axis=0), np.abs(h).max(axis=0)

    if threads is not None and threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(n_blocks)))
    else:
        parts = [run(b) for b in range(n_blocks)]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def simulate_sup(kernel: KernelSpec, grid: GridSpec, n_reps: int, seed: int,
                 sides: str = "two", threads: int | None = None) -> np.ndarray:
    """Draws of ``sup H`` (one-sided) or ``sup |H|`` (two-sided) over the grid.

    Replications are generated in fixed blocks, each with its own random
    substream keyed by ``(seed, block)``, so the output does not depend on
    ``threads``.
    """
    one, two = _simulate_both(kernel, grid, n_reps, seed, threads)
    return two if sides == "two" else one


def normal_critval(alpha: float, sides: str) -> float:
    return float(norm.ppf(1 - alpha / 2 if sides == "two" else 1 - alpha))


def _quantile_with_se(draws: np.ndarray, q: float) -> tuple[float, float]:
    value = float(np.quantile(draws, q, method="linear"))
    se = float(np.asarray(mjci(draws, prob=[q]))[0])
    return value, se


def critical_value(req: CritValRequest, threads: int | None = None) -> CritValResult:
    """Adjusted critical value: the ``1 - alpha`` quantile of the simulated supremum."""
    start = time.perf_counter()
    grid = req.grid
    draws = simulate_sup(req.kernel, grid, req.n_reps, req.seed, req.sides, threads)
    value, se = _quantile_with_se(draws, 1 - req.alpha)
    return CritValResult(value, se, req, time.perf_counter() - start, grid.n_points)


def ev_approx_critval(kernel: KernelSpec, t: float, alpha: float = 0.05, sides: str = "two") -> float:
    """Extreme-value approximation to the critical value for large ``t``.

    Known to be inaccurate at moderate ratios; the simulated value from
    :func:`critical_value` should be preferred.
    """
    if not t > math.e:
        raise DomainError(f"ratio {t} too small: iterated logarithms need t > e")
    llt = math.log(math.log(t))
    branch, const = ev_constants(kernel)
    b = math.log(const)
    if branch == "boundary_nonzero":
        b += 0.5 * math.log(llt)
    gumbel = -math.log(-0.5 * math.log(1 - alpha)) if sides == "two" else -math.log(-math.log(1 - alpha))
    scale = math.sqrt(2 * llt)
    return (gumbel + b) / scale + scale


def uncorrected_coverage(kernel: KernelSpec, t: float, z: float = 1.96, sides: str = "two",
                         n_reps: int = 20_000, seed: int = 0,
                         grid_per_log: int = DEFAULT_GRID_PER_LOG,
                         threads: int | None = None) -> float:
    """Uniform coverage over ``[1, t]`` of intervals using the fixed critical value ``z``."""
    if not t >= 1.0:
        raise ValueError("ratio must be >= 1")
    draws = simulate_sup(kernel, GridSpec.for_ratio(t, grid_per_log), n_reps, seed, sides, threads)
    return float(np.mean(draws <= z))


_KERNEL_ABBREV = {"uniform": "Unif", "triangular": "Tri", "epanechnikov": "Epa"}
_ORDER_LABEL = {0: "NW", 1: "LL", 2: "LQ"}


@dataclass
class CritValTable:
    """Critical values by ratio (rows) and kernel/order/sides/alpha (columns)."""

    ratios: list[float]
    columns: list[tuple[str, int, str, float]]
    values: dict[tuple[float, tuple[str, int, str, float]], tuple[float, float]]
    richardson: dict[tuple[str, int, str, float], float] = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["ratio,kernel,order,sides,alpha,critval,mc_se"]
        for t in self.ratios:
            for col in self.columns:
                v, se = self.values[(t, col)]
                name, order, sides, alpha = col
                lines.append(f"{t:g},{name},{order},{sides},{alpha:g},{v:.6f},{se:.6f}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = [f"{'ratio':>7}"]
        for name, order, sides, alpha in self.columns:
            label = f"{sides[0].upper()}-{_ORDER_LABEL.get(order, f'r{order}')}-{_KERNEL_ABBREV.get(name, name)}"
            if len({c[3] for c in self.columns}) > 1:
                label += f"@{alpha:g}"
            head.append(f"{label:>12}")
        out = ["".join(head)]
        for t in self.ratios:
            row = [f"{t:>7.1f}"] + [f"{self.values[(t, col)][0]:>12.2f}" for col in self.columns]
            out.append("".join(row))
        for col, delta in self.richardson.items():
            out.append(f"# grid-doubling change {col[0]} r={col[1]} {col[2]}-sided "
                       f"alpha={col[3]:g}: {delta:+.4f}" + ("" if abs(delta) < 0.01 else "  (exceeds 0.01)"))
        return "\n".join(out) + "\n"


def emit_table(kernels: Sequence[str | KernelSpec], orders: Iterable[int], ratios: Iterable[float],
               alphas: Iterable[float] = (0.05,), sides: Iterable[str] = ("one", "two"),
               n_reps: int = 100_000, seed: int = 0, grid_per_log: int = DEFAULT_GRID_PER_LOG,
               richardson: bool = False, threads: int | None = None,
               lookup=None) -> CritValTable:
    """Tabulate critical values as a ratio-by-kernel grid.

    ``lookup``, if given, is called as ``lookup(request)`` and may return a
    cached :class:`CritValResult` (or ``None``) before simulating.
    """
    ratios = [float(t) for t in ratios]
    if any(not t >= 1.0 for t in ratios):
        raise ValueError("all ratios must be >= 1")
    orders, alphas, sides = list(orders), list(alphas), list(sides)
    columns, specs = [], {}
    for s in sides:
        for r in orders:
            for kern in kernels:
                name = kern if isinstance(kern, str) else kern.name
                for a in alphas:
                    columns.append((name, r, s, a))
                    specs[(name, r)] = get_kernel(kern, r)
    values = {}
    for t in ratios:
        grid = GridSpec.for_ratio(t, grid_per_log)
        for (name, r), kspec in specs.items():
            draws = None
            for s in sides:
                for a in alphas:
                    req = CritValRequest(kspec, t, a, s, n_reps, grid_per_log, seed)
                    hit = lookup(req) if lookup is not None else None
                    if hit is not None:
                        values[(t, (name, r, s, a))] = (hit.value, hit.mc_se)
                        continue
                    if draws is None:
                        draws = _simulate_both(kspec, grid, n_reps, seed, threads)
                    v, se = _quantile_with_se(draws[1] if s == "two" else draws[0], 1 - a)
                    values[(t, (name, r, s, a))] = (v, se)
    table = CritValTable(ratios, columns, values)
    if richardson and ratios:
        t = max(ratios)
        fine = GridSpec.for_ratio(t, 2 * grid_per_log)
        for (name, r), kspec in specs.items():
            one, two = _simulate_both(kspec, fine, n_reps, seed, threads)
            for s in sides:
                for a in alphas:
                    v, _ = _quantile_with_se(two if s == "two" else one, 1 - a)
                    table.richardson[(name, r, s, a)] = v - values[(t, (name, r, s, a))][0]
    return table
