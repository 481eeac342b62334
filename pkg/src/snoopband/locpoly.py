"""One-sided local polynomial fits and regression discontinuity estimates.

Both sides use the basis ``p(|x/h|) = (1, |x/h|, ..., |x/h|^r)``, so the
intercept is the boundary limit on either side. Observations at the cutoff
belong to the upper side.

Four variance estimators are available. ``ehw`` plugs squared regression
residuals into the sandwich, ``nn`` uses nearest-neighbor differences (J=3),
``plugin`` uses the asymptotic formula with an estimated density, and
``exact`` uses a supplied conditional variance function (simulation only).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import qr, solve_triangular

from .errors import (
    IllConditioned,
    InsufficientData,
    InsufficientNeighbors,
    MissingOracle,
    WeakFirstStage,
)
from .kernels import KernelSpec, boundary_variance_constant, builtin

__all__ = [
    "RDSample",
    "LocPolyFit",
    "RDEstimate",
    "VARIANCE_METHODS",
    "fit_one_side",
    "rd_sharp",
    "rd_fuzzy",
    "variance",
    "nn_conditional_variance",
    "rd_curve",
]

VARIANCE_METHODS = ("ehw", "nn", "plugin", "exact")
NN_NEIGHBORS = 3
MAX_CONDITION = 1e12
MIN_FIRST_STAGE = 1e-6


@dataclass(frozen=True)
class RDSample:
    """Running variable ``x`` (cutoff at 0), outcome ``y`` and optional treatment ``d``."""

    x: np.ndarray
    y: np.ndarray
    d: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if self.d is not None:
            object.__setattr__(self, "d", np.asarray(self.d, dtype=float))
        if x.shape != y.shape or x.ndim != 1 or (self.d is not None and self.d.shape != x.shape):
            raise ValueError("x, y (and d) must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("data must be finite")
        if self.d is not None and not np.all((self.d >= 0) & (self.d <= 1)):
            raise ValueError("treatment must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.x.size

    @property
    def fuzzy(self) -> bool:
        return self.d is not None


@dataclass(frozen=True)
class LocPolyFit:
    side: str
    h: float
    r: int
    beta: np.ndarray  # coefficients on p(|x/h|)
    gram: np.ndarray  # sum_i w_i p_i p_i'
    residuals: np.ndarray
    n_eff: int
    index: np.ndarray  # positions of the nonzero-weight observations in the full sample
    weights: np.ndarray
    basis: np.ndarray
    n_total: int

    @property
    def intercept(self) -> float:
        return float(self.beta[0])

    def influence(self) -> np.ndarray:
        """Weights ``a_i`` with ``intercept = sum_i a_i y_i``."""
        e1 = np.zeros(self.r + 1)
        e1[0] = 1.0
        nu = np.linalg.solve(self.gram, e1)
        return self.weights * (self.basis @ nu)


@dataclass(frozen=True)
class RDEstimate:
    theta_hat: float
    se: float
    h: float
    r: int
    kernel: str
    variance_method: str
    n_eff_left: int
    n_eff_right: int
    n: int

    @property
    def sigma_hat(self) -> float:
        """Scaled standard deviation, ``se * sqrt(n h)``."""
        return self.se * float(np.sqrt(self.n * self.h))


def _side_mask(x: np.ndarray, side: str) -> np.ndarray:
    if side == "upper":
        return x >= 0
    if side == "lower":
        return x < 0
    raise ValueError("side must be 'upper' or 'lower'")


def _as_kernel(kstar) -> KernelSpec:
    return builtin(kstar) if isinstance(kstar, str) else kstar


def fit_one_side(x, y, side: str, h: float, r: int, kstar) -> LocPolyFit:
    """Weighted least squares of ``y`` on ``p(|x/h|)`` using one side of the cutoff."""
    kstar = _as_kernel(kstar)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    w_all = kstar(x / h) * _side_mask(x, side)
    index = np.flatnonzero(w_all != 0)
    if index.size < r + 2:
        raise InsufficientData(f"{side} side has {index.size} observations with positive weight at h={h:g}; need {r + 2}")
    w = w_all[index]
    if np.any(w < 0):
        raise ValueError("fitting requires a nonnegative kernel")
    basis = np.vander(np.abs(x[index]) / h, r + 1, increasing=True)
    sw = np.sqrt(w)
    A = basis * sw[:, None]
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] == 0 or (sv[0] / sv[-1]) ** 2 > MAX_CONDITION:
        raise IllConditioned(f"{side} side Gram matrix is ill-conditioned at h={h:g} for order {r}")
    Q, R, piv = qr(A, mode="economic", pivoting=True)
    beta = np.empty(r + 1)
    beta[piv] = solve_triangular(R, Q.T @ (sw * y[index]))
    gram = basis.T @ (w[:, None] * basis)
    residuals = y[index] - basis @ beta
    return LocPolyFit(side, float(h), r, beta, gram, residuals, int(index.size), index, w, basis, x.size)


def nn_conditional_variance(x, y, J: int = NN_NEIGHBORS) -> np.ndarray:
    """Nearest-neighbor estimates of ``var(y | x)`` for every observation.

    For unit ``i`` the ``J`` closest other units (ties by smaller index) give
    ``J/(J+1) * (y_i - mean of their y)^2``. With 2-d ``y`` the outer product
    is returned, shape ``(n, m, m)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n < J + 1:
        raise InsufficientNeighbors(f"nearest-neighbor variance needs at least {J + 1} units on a side, got {n}")
    order = np.argsort(x, kind="stable")
    xs = x[order]
    offsets = np.concatenate([np.arange(-J - 1, 0), np.arange(1, J + 2)])
    pos = np.arange(n)[:, None] + offsets[None, :]
    valid = (pos >= 0) & (pos < n)
    posc = np.clip(pos, 0, n - 1)
    dist = np.where(valid, np.abs(xs[posc] - xs[:, None]), np.inf)
    inner = np.abs(offsets) <= J
    d_j = np.sort(np.where(inner[None, :], dist, np.inf), axis=1)[:, J - 1]
    chosen = dist <= d_j[:, None]
    ys = y[order]
    neighbor_mean = np.empty((n,) + y.shape[1:])
    clean = chosen.sum(axis=1) == J
    sel = chosen & clean[:, None]
    if y.ndim == 1:
        neighbor_mean[clean] = (np.where(sel, ys[posc], 0.0).sum(axis=1) / J)[clean]
    else:
        neighbor_mean[clean] = (np.where(sel[..., None], ys[posc], 0.0).sum(axis=1) / J)[clean]
    for p in np.flatnonzero(~clean):
        i = order[p]
        dd = np.abs(x - x[i])
        dd[i] = np.inf
        nearest = np.lexsort((np.arange(n), dd))[:J]
        neighbor_mean[p] = y[nearest].mean(axis=0)
    diff = np.empty_like(neighbor_mean)
    diff[order] = ys - neighbor_mean
    scale = J / (J + 1)
    if y.ndim == 1:
        return scale * diff**2
    return scale * np.einsum("ij,ik->ijk", diff, diff)


def _middle(fits: Sequence[LocPolyFit], method: str, x: np.ndarray, ys: Sequence[np.ndarray],
            sigma_fn: Callable | None, J: int) -> np.ndarray:
    """Per-observation conditional covariance estimates, shape ``(n_eff, m, m)``."""
    fit = fits[0]
    m = len(fits)
    if method == "ehw":
        E = np.column_stack([f.residuals for f in fits])
        return np.einsum("ij,ik->ijk", E, E)
    if method == "nn":
        side = _side_mask(x, fit.side)
        side_idx = np.flatnonzero(side)
        Y = np.column_stack([v[side_idx] for v in ys])
        omega_side = nn_conditional_variance(x[side_idx], Y, J)
        where = np.searchsorted(side_idx, fit.index)
        return omega_side[where]
    if method == "exact":
        if sigma_fn is None:
            raise MissingOracle("exact variance needs a conditional variance function")
        s = np.asarray(sigma_fn(x[fit.index]), dtype=float)
        return s.reshape(fit.n_eff, m, m)
    raise ValueError(f"unknown variance method {method!r}")


def _side_covariance(fits: Sequence[LocPolyFit], method: str, x, ys, kstar: KernelSpec,
                     sigma_fn=None, J: int = NN_NEIGHBORS) -> np.ndarray:
    """Covariance matrix of the intercepts of ``fits`` (same side, same window)."""
    fit = fits[0]
    if method == "plugin":
        h = fit.h
        # f_hat n h with f_hat = #(|X| <= h) / (2 n h); n cancels exactly
        f_nh = np.count_nonzero(np.abs(x) <= h) / 2
        side = _side_mask(x, fit.side) & (np.abs(x) <= h)
        R = np.column_stack([v[side] - f.intercept for v, f in zip(ys, fits)])
        sigma = R.T @ R / R.shape[0]
        return boundary_variance_constant(kstar, fit.r) * sigma / f_nh
    a = fit.influence()
    omega = _middle(fits, method, x, ys, sigma_fn, J)
    return np.einsum("i,ijk->jk", a**2, omega)


def variance(fit_u: LocPolyFit, fit_l: LocPolyFit, method: str, x, y, kstar,
             sigma_fn: Callable | None = None, J: int = NN_NEIGHBORS) -> float:
    """Scaled variance ``sigma_hat^2(h) = n h (var(alpha_u) + var(alpha_l))`` for a sharp design."""
    return fit_u.n_total * fit_u.h * _intercept_var_sum(fit_u, fit_l, method, x, y, kstar, sigma_fn, J)


def _intercept_var_sum(fit_u, fit_l, method, x, y, kstar, sigma_fn=None, J=NN_NEIGHBORS) -> float:
    kstar = _as_kernel(kstar)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    vu = _side_covariance([fit_u], method, x, [y], kstar, sigma_fn, J)[0, 0]
    vl = _side_covariance([fit_l], method, x, [y], kstar, sigma_fn, J)[0, 0]
    return float(vu + vl)


def _check_method(method: str):
    if method not in VARIANCE_METHODS:
        raise ValueError(f"variance method must be one of {VARIANCE_METHODS}")


def rd_sharp(data: RDSample, h: float, r: int = 1, kstar="triangular", varmethod: str = "ehw",
             sigma_fn: Callable | None = None) -> RDEstimate:
    """Sharp RD estimate: difference of the two boundary intercepts."""
    _check_method(varmethod)
    kstar = _as_kernel(kstar)
    fu = fit_one_side(data.x, data.y, "upper", h, r, kstar)
    fl = fit_one_side(data.x, data.y, "lower", h, r, kstar)
    # unscaled sum keeps se independent of units outside the kernel support
    se = float(np.sqrt(_intercept_var_sum(fu, fl, varmethod, data.x, data.y, kstar, sigma_fn)))
    return RDEstimate(fu.intercept - fl.intercept, se, float(h), r, kstar.name, varmethod,
                      fl.n_eff, fu.n_eff, data.n)


def rd_fuzzy(data: RDSample, h: float, r: int = 1, kstar="triangular", varmethod: str = "ehw",
             sigma_fn: Callable | None = None) -> RDEstimate:
    """Fuzzy RD estimate: ratio of the outcome jump to the treatment jump.

    The standard error comes from the delta method applied to the joint
    sandwich of the four intercepts. For ``exact``, ``sigma_fn`` must return
    the 2x2 conditional covariance of ``(y, d)`` per observation.
    """
    if data.d is None:
        raise ValueError("fuzzy design needs a treatment column")
    _check_method(varmethod)
    kstar = _as_kernel(kstar)
    fits = {}
    for side in ("upper", "lower"):
        fits[side] = [fit_one_side(data.x, v, side, h, r, kstar) for v in (data.y, data.d)]
    (uy, ud), (ly, ld) = fits["upper"], fits["lower"]
    delta_d = ud.intercept - ld.intercept
    if abs(delta_d) <= MIN_FIRST_STAGE:
        raise WeakFirstStage(f"treatment jump {delta_d:.3g} at h={h:g} is numerically zero")
    theta = (uy.intercept - ly.intercept) / delta_d
    ys = [data.y, data.d]
    cov_u = _side_covariance(fits["upper"], varmethod, data.x, ys, kstar, sigma_fn)
    cov_l = _side_covariance(fits["lower"], varmethod, data.x, ys, kstar, sigma_fn)
    V = np.zeros((4, 4))
    V[:2, :2] = cov_u
    V[2:, 2:] = cov_l
    grad = np.array([1.0, -theta, -1.0, theta]) / delta_d
    se = float(np.sqrt(grad @ V @ grad))
    return RDEstimate(float(theta), se, float(h), r, kstar.name, varmethod, ld.n_eff, uy.n_eff, data.n)


@dataclass(frozen=True)
class RDCurve:
    h: np.ndarray
    theta_hat: np.ndarray
    se: np.ndarray
    n_eff_left: np.ndarray
    n_eff_right: np.ndarray
    ok: np.ndarray  # False where a fit failed (values are nan)


def _side_curve(x, y, hs, r, kstar: KernelSpec, method, sigma_fn, n_total, x_all, plugin_const):
    """Vectorized intercepts and intercept variances over a bandwidth grid (one side)."""
    H = hs.size
    ax = np.abs(x)
    U = ax[None, :] / hs[:, None]
    W = kstar(U)
    n_eff = np.count_nonzero(W, axis=1)
    Pm = U[..., None] ** np.arange(r + 1)
    WP = W[..., None] * Pm
    G = np.einsum("hij,hik->hjk", WP, Pm)
    rhs = np.einsum("hij,i->hj", WP, y)
    ok = n_eff >= r + 2
    # condition check on the scaled Gram, equal to that of sqrt(w) * basis
    with np.errstate(invalid="ignore", divide="ignore"):
        ev = np.linalg.eigvalsh(np.where(ok[:, None, None], G, np.eye(r + 1)))
        cond = ev[:, -1] / ev[:, 0]
    ok &= (ev[:, 0] > 0) & (cond <= MAX_CONDITION)
    Gs = np.where(ok[:, None, None], G, np.eye(r + 1))
    beta = np.linalg.solve(Gs, rhs[..., None])[..., 0]
    alpha = beta[:, 0]
    if method == "plugin":
        win = (ax[None, :] <= hs[:, None])
        resid2 = (y[None, :] - alpha[:, None]) ** 2
        cnt = win.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            sig2 = np.where(win, resid2, 0.0).sum(axis=1) / cnt
            f_hat = np.count_nonzero(np.abs(x_all)[None, :] <= hs[:, None], axis=1) / (2 * n_total * hs)
            var = plugin_const * sig2 / (f_hat * n_total * hs)
    else:
        e1 = np.zeros(r + 1)
        e1[0] = 1.0
        nu = np.linalg.solve(Gs, np.broadcast_to(e1, (H, r + 1))[..., None])[..., 0]
        a = W * np.einsum("hij,hj->hi", Pm, nu)
        if method == "ehw":
            resid = y[None, :] - np.einsum("hij,hj->hi", Pm, beta)
            omega = resid**2
        elif method == "nn":
            omega = nn_conditional_variance(x, y)[None, :]
        elif method == "exact":
            if sigma_fn is None:
                raise MissingOracle("exact variance needs a conditional variance function")
            omega = np.asarray(sigma_fn(x), dtype=float)[None, :]
        else:
            raise ValueError(f"unknown variance method {method!r}")
        var = np.sum(a**2 * omega, axis=1)
    alpha = np.where(ok, alpha, np.nan)
    var = np.where(ok, var, np.nan)
    return alpha, var, n_eff, ok


def rd_curve(data: RDSample, hs, r: int = 1, kstar="triangular", varmethod: str = "ehw",
             sigma_fn: Callable | None = None, on_error: str = "raise") -> RDCurve:
    """Sharp RD estimates and standard errors over a grid of bandwidths.

    Numerically equivalent to calling :func:`rd_sharp` for each ``h`` but
    vectorized over the grid. With ``on_error="nan"`` failed bandwidths are
    flagged in ``ok`` instead of raising.
    """
    _check_method(varmethod)
    kstar = _as_kernel(kstar)
    hs = np.asarray(hs, dtype=float)
    if np.any(hs <= 0):
        raise ValueError("bandwidths must be positive")
    plugin_const = boundary_variance_constant(kstar, r) if varmethod == "plugin" else None
    out = {}
    for side in ("upper", "lower"):
        m = _side_mask(data.x, side)
        if varmethod == "nn" and m.sum() < NN_NEIGHBORS + 1:
            raise InsufficientNeighbors(f"{side} side has fewer than {NN_NEIGHBORS + 1} units")
        out[side] = _side_curve(data.x[m], data.y[m], hs, r, kstar, varmethod, sigma_fn,
                                data.n, data.x, plugin_const)
    au, vu, nu_, oku = out["upper"]
    al, vl, nl, okl = out["lower"]
    ok = oku & okl
    if on_error == "raise" and not ok.all():
        bad = hs[~ok][0]
        if min(nu_[~ok][0], nl[~ok][0]) < r + 2:
            raise InsufficientData(f"too few observations with positive weight at h={bad:g}")
        raise IllConditioned(f"Gram matrix is ill-conditioned at h={bad:g} for order {r}")
    return RDCurve(hs, au - al, np.sqrt(vu + vl), nl, nu_, ok)
