"""Symmetric, compactly supported kernels as exact piecewise polynomials.

A kernel is stored by its restriction to ``[0, A]`` as a list of polynomial
pieces in ``|u|`` and extended to the negative half-line by symmetry. Every
integral used downstream (moments, squared norms, overlaps, extreme-value
constants) is computed from exact antiderivatives, so critical values carry no
quadrature error.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import SingularMoments

__all__ = [
    "Piece",
    "KernelSpec",
    "EquivalentKernel",
    "BUILTIN_KERNELS",
    "builtin",
    "get_kernel",
    "kernel_moment",
    "equivalent_kernel",
    "l2_norm_sq",
    "overlap",
    "gp_correlation",
    "ev_constants",
    "parse_kernel_config",
    "load_kernel_config",
]

MAX_DEGREE = 12
_EDGE_TOL = 1e-12


@dataclass(frozen=True)
class Piece:
    lo: float
    hi: float
    coef: tuple[float, ...]  # ascending powers of |u|

    def __post_init__(self):
        if not (0.0 <= self.lo < self.hi):
            raise ValueError(f"invalid piece interval [{self.lo}, {self.hi}]")
        if len(self.coef) == 0 or len(self.coef) > MAX_DEGREE + 1:
            raise ValueError(f"piece degree must be between 0 and {MAX_DEGREE}")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel ``k(u)`` supported on ``[-support, support]``.

    ``pieces`` partition ``[0, support]`` in increasing order; the last piece
    is closed at ``support`` so that, e.g., the uniform kernel equals 1/2 at
    ``|u| = 1``.
    """

    name: str
    support: float
    pieces: tuple[Piece, ...]

    def __post_init__(self):
        if self.support <= 0:
            raise ValueError("support must be positive")
        if not self.pieces:
            raise ValueError("kernel needs at least one piece")
        if abs(self.pieces[0].lo) > 0 or abs(self.pieces[-1].hi - self.support) > 1e-14:
            raise ValueError("pieces must cover [0, support]")
        for left, right in zip(self.pieces, self.pieces[1:]):
            if abs(left.hi - right.lo) > 1e-14:
                raise ValueError("pieces must be contiguous")
        if abs(integral(self)) <= 1e-9:
            raise ValueError("kernel must have nonzero integral")

    def __call__(self, u):
        a = np.abs(np.asarray(u, dtype=float))
        out = np.zeros_like(a)
        last = len(self.pieces) - 1
        for i, pc in enumerate(self.pieces):
            mask = (a >= pc.lo) & ((a < pc.hi) | ((i == last) & (a <= pc.hi)))
            out[mask] = P.polyval(a[mask], pc.coef)
        return out if out.ndim else float(out)

    @property
    def breakpoints(self) -> list[float]:
        return [pc.lo for pc in self.pieces] + [self.support]

    def edge_value(self) -> float:
        """k(A), the limit from inside the support."""
        return float(P.polyval(self.support, self.pieces[-1].coef))

    def derivative_pieces(self) -> list[Piece]:
        return [Piece(pc.lo, pc.hi, tuple(float(c) for c in P.polyder(pc.coef)) or (0.0,)) for pc in self.pieces]

    def fingerprint(self) -> str:
        """Hash of the piecewise-polynomial coefficients (name excluded)."""
        h = hashlib.sha256()
        h.update(repr(float(self.support)).encode())
        for pc in self.pieces:
            h.update(repr((float(pc.lo), float(pc.hi), tuple(float(c) for c in pc.coef))).encode())
        return h.hexdigest()[:16]

    def scaled(self, c: float) -> "KernelSpec":
        """Same kernel multiplied by the constant ``c``."""
        return KernelSpec(
            self.name,
            self.support,
            tuple(Piece(pc.lo, pc.hi, tuple(c * x for x in pc.coef)) for pc in self.pieces),
        )


@dataclass(frozen=True)
class EquivalentKernel:
    base: KernelSpec
    order_r: int
    boundary: bool
    result: KernelSpec


def _poly_integral(coef, lo: float, hi: float) -> float:
    anti = P.polyint(coef)
    return float(P.polyval(hi, anti) - P.polyval(lo, anti))


def integral(k: KernelSpec) -> float:
    """Integral of ``k`` over the real line."""
    return 2.0 * sum(_poly_integral(pc.coef, pc.lo, pc.hi) for pc in k.pieces)


def _times_power(coef, j: int):
    return np.concatenate([np.zeros(j), np.asarray(coef, dtype=float)])


def kernel_moment(k: KernelSpec, j: int, one_sided: bool = True) -> float:
    """Exact moment ``int u^j k(u) du`` over ``[0, A]`` or over ``[-A, A]``."""
    if j < 0 or j > MAX_DEGREE:
        raise ValueError(f"moment order must lie in [0, {MAX_DEGREE}]")
    half = sum(_poly_integral(_times_power(pc.coef, j), pc.lo, pc.hi) for pc in k.pieces)
    if one_sided:
        return half
    return 0.0 if j % 2 else 2.0 * half


def _solve_first_row(M: np.ndarray) -> np.ndarray:
    size = M.shape[0]
    e1 = np.zeros(size)
    e1[0] = 1.0
    det = np.linalg.det(M)
    if not np.isfinite(det) or abs(det) < 1e-14 * max(1.0, np.abs(M).max()) ** size:
        raise SingularMoments(f"moment matrix is singular (det={det:.3e})")
    x = np.linalg.solve(M, e1)
    if np.linalg.norm(M @ x - e1) > 1e-12:
        raise SingularMoments("moment system residual exceeds 1e-12")
    return x


def equivalent_kernel(kstar: KernelSpec, r: int, boundary: bool = True) -> EquivalentKernel:
    """Equivalent kernel ``e1' M^{-1} p(|u|) k*(u)`` of an order-``r`` local polynomial.

    For ``boundary=True`` the moments are one-sided, matching estimation at a
    boundary or on either side of a discontinuity. With ``boundary=False``
    (interior point) odd moments vanish and the result stays even. Order 0
    returns ``k*`` unchanged.
    """
    if r < 0:
        raise ValueError("order must be nonnegative")
    if r == 0:
        return EquivalentKernel(kstar, 0, boundary, kstar)
    M = np.array(
        [[kernel_moment(kstar, i + j, one_sided=boundary) for j in range(r + 1)] for i in range(r + 1)]
    )
    w = _solve_first_row(M)
    if not boundary:
        w[1::2] = 0.0
    pieces = []
    for pc in kstar.pieces:
        coef = P.polymul(w, pc.coef)
        coef = np.trim_zeros(np.asarray(coef, dtype=float), "b")
        if coef.size > MAX_DEGREE + 1:
            raise ValueError("equivalent kernel exceeds the degree cap")
        pieces.append(Piece(pc.lo, pc.hi, tuple(float(c) for c in coef) if coef.size else (0.0,)))
    suffix = f"-r{r}" + ("" if boundary else "-interior")
    return EquivalentKernel(kstar, r, boundary, KernelSpec(kstar.name + suffix, kstar.support, tuple(pieces)))


def _product_integral(k: KernelSpec, a: float) -> float:
    """``int_0^A k(a u) k(u) du`` for ``0 < a <= 1``, piece by piece."""
    cuts = set(k.breakpoints)
    cuts.update(b / a for b in k.breakpoints if b / a < k.support)
    cuts = sorted(c for c in cuts if 0.0 <= c <= k.support)
    total = 0.0
    scale_pows = a ** np.arange(MAX_DEGREE + 1)
    for lo, hi in zip(cuts, cuts[1:]):
        if hi - lo <= 0:
            continue
        mid = 0.5 * (lo + hi)
        p_in = _piece_at(k, mid)
        p_sc = _piece_at(k, a * mid)
        if p_in is None or p_sc is None:
            continue
        sc_coef = np.asarray(p_sc.coef) * scale_pows[: len(p_sc.coef)]
        total += _poly_integral(P.polymul(p_in.coef, sc_coef), lo, hi)
    return total


def _piece_at(k: KernelSpec, x: float) -> Piece | None:
    for pc in k.pieces:
        if pc.lo <= x <= pc.hi:
            return pc
    return None


def l2_norm_sq(k: KernelSpec) -> float:
    return 2.0 * sum(_poly_integral(P.polymul(pc.coef, pc.coef), pc.lo, pc.hi) for pc in k.pieces)


def overlap(k: KernelSpec, a: float) -> float:
    """``int k(a u) k(u) du`` for ``0 < a <= 1``."""
    if not (0.0 < a <= 1.0):
        raise ValueError("overlap ratio must lie in (0, 1]")
    return 2.0 * _product_integral(k, a)


def gp_correlation(k: KernelSpec, a: float) -> float:
    """Correlation of the limiting process at bandwidths ``h' = a h`` and ``h``."""
    if a == 1.0:
        return 1.0
    return math.sqrt(a) * overlap(k, a) / l2_norm_sq(k)


def ev_constants(k: KernelSpec) -> tuple[str, float]:
    """Constant entering the extreme-value centering term.

    Returns ``("boundary_nonzero", c1)`` when ``k(A) != 0`` and
    ``("boundary_zero", c2)`` otherwise.
    """
    l2 = l2_norm_sq(k)
    edge = k.edge_value()
    if abs(edge) > _EDGE_TOL:
        return "boundary_nonzero", k.support * edge**2 / (math.sqrt(math.pi) * l2)
    inner = 0.0
    for pc, dpc in zip(k.pieces, k.derivative_pieces()):
        q = P.polyadd(_times_power(dpc.coef, 1), 0.5 * np.asarray(pc.coef))
        inner += _poly_integral(P.polymul(q, q), pc.lo, pc.hi)
    inner *= 2.0
    return "boundary_zero", math.sqrt(inner / l2) / (2.0 * math.pi)


BUILTIN_KERNELS: dict[str, KernelSpec] = {
    "uniform": KernelSpec("uniform", 1.0, (Piece(0.0, 1.0, (0.5,)),)),
    "triangular": KernelSpec("triangular", 1.0, (Piece(0.0, 1.0, (1.0, -1.0)),)),
    "epanechnikov": KernelSpec("epanechnikov", 1.0, (Piece(0.0, 1.0, (0.75, 0.0, -0.75)),)),
}


def builtin(name: str) -> KernelSpec:
    try:
        return BUILTIN_KERNELS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown kernel {name!r}; choose from {sorted(BUILTIN_KERNELS)}") from None


def get_kernel(name_or_spec: str | KernelSpec, order: int = 0, boundary: bool = True) -> KernelSpec:
    """Kernel entering the limiting process for a base kernel and polynomial order."""
    base = builtin(name_or_spec) if isinstance(name_or_spec, str) else name_or_spec
    return equivalent_kernel(base, order, boundary).result


_KEY_RE = re.compile(r"^(\w+)\s*[=:]\s*(.+)$")
_PIECE_RE = re.compile(r"^\[\s*([^,\]]+)\s*,\s*([^\]]+)\s*\]\s*:\s*(.+)$")


def parse_kernel_config(text: str) -> KernelSpec:
    """Parse a key-value kernel description.

    Example::

        name = biweight
        support = 1
        [0, 1]: 0.9375 0 -1.875 0 0.9375
    """
    name, support, pieces = None, None, []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _PIECE_RE.match(line)
        if m:
            lo, hi = float(m.group(1)), float(m.group(2))
            coef = tuple(float(c) for c in m.group(3).split())
            pieces.append(Piece(lo, hi, coef))
            continue
        kv = _KEY_RE.match(line)
        if not kv:
            raise ValueError(f"cannot parse kernel config line: {raw!r}")
        key, value = kv.group(1).lower(), kv.group(2)
        if key == "name":
            name = value
        elif key == "support":
            support = float(value)
        else:
            raise ValueError(f"unknown kernel config key {key!r}")
    if name is None or support is None or not pieces:
        raise ValueError("kernel config needs name, support and at least one piece")
    return KernelSpec(name, support, tuple(sorted(pieces, key=lambda pc: pc.lo)))


def load_kernel_config(path: str | Path) -> KernelSpec:
    return parse_kernel_config(Path(path).read_text(encoding="utf-8"))



def boundary_variance_constant(kstar: KernelSpec, r: int) -> float:
    """``int_0^A k(u)^2 du`` for the normalized boundary equivalent kernel.

    Unlike :func:`equivalent_kernel`, order 0 is normalized here as well
    (``k*/mu_0``), so the value is the asymptotic variance factor of a
    one-sided intercept.
    """
    M = np.array([[kernel_moment(kstar, i + j) for j in range(r + 1)] for i in range(r + 1)])
    w = _solve_first_row(M)
    return sum(
        _poly_integral(P.polymul(P.polymul(w, pc.coef), P.polymul(w, pc.coef)), pc.lo, pc.hi)
        for pc in kstar.pieces
    )
