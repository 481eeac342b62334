"""Independent reference computations used by the tests.

Nothing here imports the package's numerical routines; each function is a
direct, deliberately naive implementation of the quantity it checks.
"""

from __future__ import annotations

import math

import numpy as np


def simpson(f, a: float, b: float, tol: float = 1e-10, depth: int = 60) -> float:
    """Adaptive Simpson quadrature."""

    def rule(lo, hi, flo, fmid, fhi):
        return (hi - lo) / 6.0 * (flo + 4 * fmid + fhi)

    def rec(lo, hi, flo, fmid, fhi, whole, tol, depth):
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = rule(lo, mid, flo, flm, fmid)
        right = rule(mid, hi, fmid, frm, fhi)
        if depth <= 0 or abs(left + right - whole) <= 15 * tol:
            return left + right + (left + right - whole) / 15
        return (rec(lo, mid, flo, flm, fmid, left, tol / 2, depth - 1)
                + rec(mid, hi, fmid, frm, fhi, right, tol / 2, depth - 1))

    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    return rec(a, b, fa, fm, fb, rule(a, b, fa, fm, fb), tol, depth)


def simpson_pieces(f, cuts, tol=1e-10) -> float:
    """Adaptive Simpson over consecutive intervals (for functions with kinks)."""
    return sum(simpson(f, lo, hi, tol) for lo, hi in zip(cuts[:-1], cuts[1:]) if hi > lo)


# closed forms of common kernels as plain functions
def k_uniform(u):
    return 0.5 * (abs(u) <= 1)


def k_triangular(u):
    return max(1 - abs(u), 0.0)


def k_epanechnikov(u):
    return 0.75 * max(1 - u * u, 0.0)


CLOSED = {"uniform": k_uniform, "triangular": k_triangular, "epanechnikov": k_epanechnikov}


def wls_normal_equations(x, y, side, h, r, kfun):
    """Intercept-first coefficients from explicitly assembled normal equations."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    mask = x >= 0 if side == "upper" else x < 0
    G = np.zeros((r + 1, r + 1))
    b = np.zeros(r + 1)
    for xi, yi, m in zip(x, y, mask):
        if not m:
            continue
        w = kfun(xi / h)
        if w == 0:
            continue
        p = np.array([(abs(xi) / h) ** j for j in range(r + 1)])
        G += w * np.outer(p, p)
        b += w * p * yi
    return np.linalg.solve(G, b), G


def sandwich_intercept_var(x, y, side, h, r, kfun, sigma2=None):
    """``e1' G^-1 (sum w^2 s2 p p') G^-1 e1`` with EHW residuals unless ``sigma2`` is given."""
    beta, G = wls_normal_equations(x, y, side, h, r, kfun)
    mask = (np.asarray(x) >= 0) if side == "upper" else (np.asarray(x) < 0)
    meat = np.zeros((r + 1, r + 1))
    for i, (xi, yi) in enumerate(zip(x, y)):
        if not mask[i]:
            continue
        w = kfun(xi / h)
        if w == 0:
            continue
        p = np.array([(abs(xi) / h) ** j for j in range(r + 1)])
        s2 = (yi - p @ beta) ** 2 if sigma2 is None else sigma2[i]
        meat += w * w * s2 * np.outer(p, p)
    Gi = np.linalg.inv(G)
    return (Gi @ meat @ Gi)[0, 0]


def nn_sigma2(x, y, i, J=3):
    """Nearest-neighbor variance for unit ``i`` among same-side units, ties by index."""
    x = np.asarray(x, float)
    same = [k for k in range(len(x)) if k != i and ((x[k] >= 0) == (x[i] >= 0))]
    same.sort(key=lambda k: (abs(x[k] - x[i]), k))
    nb = same[:J]
    return J / (J + 1) * (y[i] - np.mean([y[k] for k in nb])) ** 2


def two_sls(y, d, zinst):
    """Just-identified IV slope with HC0 standard error via explicit matrices."""
    n = len(y)
    X = np.column_stack([np.ones(n), d])
    Z = np.column_stack([np.ones(n), zinst])
    beta = np.linalg.inv(Z.T @ X) @ (Z.T @ y)
    u = y - X @ beta
    A = np.linalg.inv(Z.T @ X)
    S = sum(u[i] ** 2 * np.outer(Z[i], Z[i]) for i in range(n))
    V = A @ S @ A.T
    return beta[1], math.sqrt(V[1, 1])


def brownian_sup(ratio: float, n_points: int, n_reps: int, rng) -> np.ndarray:
    """``sup |B(h)/sqrt(h)|`` over a log grid on ``[1, ratio]`` from independent increments."""
    h = np.exp(np.linspace(0.0, math.log(ratio), n_points))
    steps = np.diff(np.concatenate([[0.0], h]))
    inc = rng.standard_normal((n_reps, n_points)) * np.sqrt(steps)
    B = np.cumsum(inc, axis=1)
    return np.max(np.abs(B / np.sqrt(h)), axis=1)


def ev_formula(c_branch: str, const: float, t: float, alpha: float, two_sided: bool) -> float:
    """Extreme-value critical value, written out independently of the package."""
    lt = math.log(t)
    llt = math.log(lt)
    b = math.log(const) + (0.5 * math.log(llt) if c_branch == "nonzero" else 0.0)
    g = -math.log(-0.5 * math.log(1 - alpha)) if two_sided else -math.log(-math.log(1 - alpha))
    return (g + b) / math.sqrt(2 * llt) + math.sqrt(2 * llt)
