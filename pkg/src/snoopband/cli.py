"""Command-line interface.

Every run writes a flat ``key=value`` manifest next to its output (or to
``--manifest``) recording the flags, seed, package version and cache hits.
Exit status is 0 on success, 2 for invalid arguments and 1 for runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bands import EstimateCurve, sensitivity_ratio, snooping_adjusted_ci, uniform_band
from .errors import ParseError, SchemaMismatch, SnoopbandError
from .gp_critval import (
    DEFAULT_GRID_PER_LOG,
    TABLE1_RATIOS,
    CritValRequest,
    CritValResult,
    critical_value,
    emit_table,
    ev_approx_critval,
)
from .kernels import KernelSpec, builtin, get_kernel, load_kernel_config
from .locpoly import VARIANCE_METHODS, RDSample, rd_curve, rd_fuzzy, rd_sharp
from .mc import DESIGNS, RANGE_RULES, CoverageRow, MCConfig, run_coverage
from .treatment import AteSample, LateSample, ate_trim_band, late_band

__all__ = ["main", "read_csv", "CritValCache", "SCHEMAS", "UsageError"]

SCHEMAS = {
    "sharp": ("x", "y"),
    "fuzzy": ("x", "d", "y"),
    "late": ("z", "d", "y"),
    "ate": ("y", "d", "e", "mu0", "mu1"),
}


class UsageError(Exception):
    """Invalid command-line value; maps to exit status 2."""

    def __init__(self, flag: str, message: str):
        super().__init__(f"{flag}: {message}")
        self.flag = flag


# ---------------------------------------------------------------------------
# CSV input


def read_csv(path: str | Path, schema: str | Sequence[str]) -> dict[str, np.ndarray]:
    """Read a headed numeric CSV into column arrays.

    ``schema`` is a schema name or a column tuple. For ``"rd"`` the header
    decides between the sharp ``x,y`` and fuzzy ``x,d,y`` layouts. Blank
    lines and lines starting with ``#`` are skipped; errors carry the
    1-based file line number.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        lines = list(enumerate(fh, start=1))
    body = [(no, ln) for no, ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    if not body:
        raise SchemaMismatch("file has no header", line=None)
    head_no, head_line = body[0]
    header = tuple(c.strip() for c in next(csv.reader([head_line])))
    if schema == "rd":
        options = [SCHEMAS["sharp"], SCHEMAS["fuzzy"]]
    else:
        options = [SCHEMAS[schema] if isinstance(schema, str) else tuple(schema)]
    if header not in options:
        expected = " or ".join(",".join(o) for o in options)
        raise SchemaMismatch(f"header {','.join(header)!r} does not match {expected}", line=head_no)
    cols: list[list[float]] = [[] for _ in header]
    for no, ln in body[1:]:
        fields = next(csv.reader([ln]))
        if len(fields) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(fields)}", line=no)
        for j, f in enumerate(fields):
            try:
                v = float(f)
            except ValueError:
                raise ParseError(f"column {header[j]!r}: cannot parse {f.strip()!r} as a number", line=no) from None
            if not math.isfinite(v):
                raise ParseError(f"column {header[j]!r}: value {f.strip()!r} is not finite", line=no)
            cols[j].append(v)
    return {name: np.array(c) for name, c in zip(header, cols)}


# ---------------------------------------------------------------------------
# critical-value cache


@dataclass(frozen=True)
class _Key:
    fingerprint: str
    order: int
    sides: str
    alpha: str
    ratio: str
    reps: int
    grid: int
    seed: int


class CritValCache:
    """Append-only CSV ledger of simulated critical values.

    Floats are stored with ``repr`` so hits reproduce the original values bit for bit.
    """

    FIELDS = ("fingerprint", "kernel", "order", "sides", "alpha", "ratio", "reps", "grid_per_log", "seed",
              "value", "mc_se", "n_points")

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._rows: dict[_Key, tuple[float, float, int]] = {}
        self.hits = 0
        self.misses = 0
        if self.path is not None and self.path.exists():
            with open(self.path, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    try:
                        key = _Key(row["fingerprint"], int(row["order"]), row["sides"], row["alpha"], row["ratio"],
                                   int(row["reps"]), int(row["grid_per_log"]), int(row["seed"]))
                        self._rows[key] = (float(row["value"]), float(row["mc_se"]), int(row["n_points"]))
                    except (KeyError, ValueError, TypeError):
                        continue  # tolerate a truncated trailing line

    @staticmethod
    def _key(req: CritValRequest, order: int) -> _Key:
        return _Key(req.kernel.fingerprint(), order, req.sides, repr(float(req.alpha)), repr(float(req.ratio_t)),
                    req.n_reps, req.grid_per_log, req.seed)

    def get(self, req: CritValRequest, order: int) -> CritValResult | None:
        with self._lock:
            hit = self._rows.get(self._key(req, order))
            if hit is None:
                self.misses += 1
                return None
            self.hits += 1
        return CritValResult(hit[0], hit[1], req, 0.0, hit[2])

    def contains(self, req: CritValRequest, order: int) -> bool:
        """Membership test that leaves the hit and miss counters alone."""
        with self._lock:
            return self._key(req, order) in self._rows

    def put(self, res: CritValResult, order: int) -> None:
        req = res.request
        key = self._key(req, order)
        with self._lock:
            self._rows[key] = (res.value, res.mc_se, res.n_points)
            if self.path is None:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new = not self.path.exists() or self.path.stat().st_size == 0
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                if new:
                    w.writerow(self.FIELDS)
                w.writerow([key.fingerprint, req.kernel.name, order, req.sides, key.alpha, key.ratio, req.n_reps,
                            req.grid_per_log, req.seed, repr(res.value), repr(res.mc_se), res.n_points])

    def critical_value(self, req: CritValRequest, order: int, threads: int | None = None) -> CritValResult:
        hit = self.get(req, order)
        if hit is not None:
            return hit
        res = critical_value(req, threads)
        self.put(res, order)
        return res


def _default_cache() -> Path:
    env = os.environ.get("SNOOPBAND_CACHE")
    if env:
        return Path(env)
    base = os.environ.get("XDG_CACHE_HOME") or Path.home() / ".cache"
    return Path(base) / "snoopband" / "critvals.csv"


# ---------------------------------------------------------------------------
# argument validation helpers


def _positive(flag, v):
    if not v > 0:
        raise UsageError(flag, "must be positive")
    return v


def _check_alpha(v):
    if not 0 < v <= 0.5:
        raise UsageError("--alpha", "alpha must lie in (0, 0.5]")


def _check_ratio(v):
    if not v >= 1:
        raise UsageError("--ratio", "ratio must be ≥ 1")


def _check_reps(v, minimum=2):
    if v < minimum:
        raise UsageError("--reps", f"need at least {minimum} replications")


def _kernel_base(value: str) -> KernelSpec:
    p = Path(value)
    if value.lower() in ("uniform", "triangular", "epanechnikov"):
        return builtin(value)
    if p.exists():
        try:
            return load_kernel_config(p)
        except (ValueError, OSError) as exc:
            raise UsageError("--kernel", str(exc)) from None
    raise UsageError("--kernel", f"unknown kernel {value!r}: use uniform, triangular, epanechnikov or a config file")


def _check_order(v):
    if v not in (0, 1, 2):
        raise UsageError("--order", "order must be 0, 1 or 2")


def _hgrid(hmin: float, hmax: float, grid: int, linear: bool = True) -> np.ndarray:
    _positive("--hmin", hmin)
    if not hmax >= hmin:
        raise UsageError("--hmax", "must be at least --hmin")
    if grid < 1:
        raise UsageError("--grid", "must be at least 1")
    if grid == 1 or hmax == hmin:
        return np.array([hmin])
    return np.linspace(hmin, hmax, grid)


# ---------------------------------------------------------------------------
# subcommands


class _Run:
    """Per-invocation context: output, manifest entries and the cache."""

    def __init__(self, args):
        self.args = args
        self.cache = CritValCache(None if args.no_cache else (args.cache or _default_cache()))
        self.manifest: dict[str, str] = {}

    def emit(self, text: str, name: str | None = None):
        out = self.args.out
        if out is None:
            sys.stdout.write(text)
            return
        path = Path(out) / name if name is not None else Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


def _cmd_critval(run: _Run) -> None:
    a = run.args
    _check_ratio(a.ratio)
    _check_alpha(a.alpha)
    _check_order(a.order)
    _check_reps(a.reps)
    if a.grid_per_log < 1:
        raise UsageError("--grid-per-log", "must be positive")
    k = get_kernel(_kernel_base(a.kernel), a.order)
    if a.ev_approx:
        v = ev_approx_critval(k, a.ratio, a.alpha, a.sides)
        run.emit("ratio,kernel,order,sides,alpha,critval_ev\n"
                 f"{a.ratio:g},{a.kernel},{a.order},{a.sides},{a.alpha:g},{v!r}\n")
        return
    req = CritValRequest(k, a.ratio, a.alpha, a.sides, a.reps, a.grid_per_log, a.seed)
    res = run.cache.critical_value(req, a.order, a.threads)
    run.emit("ratio,kernel,order,sides,alpha,critval,mc_se\n"
             f"{a.ratio:g},{a.kernel},{a.order},{a.sides},{a.alpha:g},{res.value!r},{res.mc_se!r}\n")


def _cmd_tables(run: _Run) -> None:
    a = run.args
    _check_reps(a.reps, 1000)
    if a.preset == "table1":
        kernels, orders, ratios, alphas = ["uniform", "triangular", "epanechnikov"], [0, 1], TABLE1_RATIOS, [0.05]
    else:
        kernels, orders, ratios, alphas = a.kernels, a.orders, a.ratios, a.alphas
    for t in ratios:
        _check_ratio(t)
    for al in alphas:
        _check_alpha(al)
    kernels = [_kernel_base(k) for k in kernels]

    order_of = {get_kernel(k, r).fingerprint(): r for k in kernels for r in orders}

    def lookup(req):
        return run.cache.get(req, order_of[req.kernel.fingerprint()])

    table = emit_table(kernels, orders, ratios, alphas, ("one", "two"), a.reps, a.seed, a.grid_per_log,
                       a.richardson, a.threads, lookup)
    for (t, (name, order, sides, alpha)), (v, se) in table.values.items():
        base = next(k for k in kernels if k.name == name)
        req = CritValRequest(get_kernel(base, order), t, alpha, sides, a.reps, a.grid_per_log, a.seed)
        if not run.cache.contains(req, order):
            run.cache.put(CritValResult(v, se, req, 0.0, 0), order)
    stem = a.preset or "table"
    if a.out is None:
        sys.stdout.write(table.to_csv())
        sys.stdout.write(table.to_text())
    else:
        run.emit(table.to_csv(), f"{stem}.csv")
        run.emit(table.to_text(), f"{stem}.txt")


def _band_critval(run: _Run, kernel: KernelSpec, order: int, ratio: float):
    a = run.args
    req = CritValRequest(get_kernel(kernel, order), ratio, a.alpha, a.sides, a.reps, a.grid_per_log, a.seed)
    return run.cache.critical_value(req, order, a.threads)


def _load_rd(path) -> RDSample:
    cols = read_csv(path, "rd")
    return RDSample(cols["x"], cols["y"], cols.get("d"))


def _cmd_rd(run: _Run) -> None:
    a = run.args
    _positive("--h", a.h)
    _check_order(a.order)
    data = _load_rd(a.data)
    k = _kernel_base(a.kernel)
    fn = rd_fuzzy if data.fuzzy else rd_sharp
    e = fn(data, a.h, a.order, k, a.var)
    run.emit("h,theta,se,kernel,order,var,n_eff_left,n_eff_right,fuzzy\n"
             f"{e.h!r},{e.theta_hat!r},{e.se!r},{e.kernel},{e.r},{e.variance_method},"
             f"{e.n_eff_left},{e.n_eff_right},{int(data.fuzzy)}\n")


def _cmd_band(run: _Run) -> None:
    a = run.args
    _check_alpha(a.alpha)
    _check_order(a.order)
    hs = _hgrid(a.hmin, a.hmax, a.grid)
    data = _load_rd(a.data)
    k = _kernel_base(a.kernel)
    if data.fuzzy:
        ests = [rd_fuzzy(data, h, a.order, k, a.var) for h in hs]
        curve = EstimateCurve(hs, [e.theta_hat for e in ests], [e.se for e in ests], k.name, a.order, "rd-fuzzy",
                              np.array([e.n_eff_left for e in ests]), np.array([e.n_eff_right for e in ests]))
    else:
        c = rd_curve(data, hs, a.order, k, a.var)
        curve = EstimateCurve(hs, c.theta_hat, c.se, k.name, a.order, "rd", c.n_eff_left, c.n_eff_right)
    cv = _band_critval(run, k, a.order, curve.ratio)
    band = uniform_band(curve, a.alpha, a.sides, cv)
    run.manifest["critval"] = repr(cv.value)
    run.emit(f"# critval={cv.value!r} mc_se={cv.mc_se!r} ratio={curve.ratio!r}\n" + band.to_csv())


def _cmd_adjust(run: _Run) -> None:
    a = run.args
    _check_ratio(a.ratio)
    _check_alpha(a.alpha)
    _check_order(a.order)
    _positive("--se", a.se)
    k = _kernel_base(a.kernel)
    c = a.critval
    if c is None:
        c = _band_critval(run, k, a.order, a.ratio).value
    lo, hi = snooping_adjusted_ci(a.theta, a.se, a.ratio, k, a.order, a.alpha, a.sides, critval=c)
    lines = ["theta,se,ratio,critval,lo,hi", f"{a.theta!r},{a.se!r},{a.ratio!r},{c!r},{lo!r},{hi!r}"]
    if a.exclude is not None:
        s = sensitivity_ratio(a.theta, a.se, k, a.order, a.alpha, a.sides, a.exclude)
        lines.append(f"# max ratio excluding {a.exclude:g}: {s}")
    run.emit("\n".join(lines) + "\n")


def _cmd_late(run: _Run) -> None:
    a = run.args
    _check_alpha(a.alpha)
    hs = _hgrid(a.hmin, a.hmax, a.grid)
    cols = read_csv(a.data, "late")
    data = LateSample(cols["z"], cols["d"], cols["y"])
    band = late_band(data, hs, a.alpha, a.sides, seed=a.seed, n_reps=a.reps)
    run.emit(f"# critval={band.critval.value!r} mc_se={band.critval.mc_se!r}\n" + band.to_csv())


def _cmd_ate(run: _Run) -> None:
    a = run.args
    _check_alpha(a.alpha)
    if not 0 <= a.hmin <= a.hmax < 0.5:
        raise UsageError("--hmax", "trimming levels need 0 ≤ hmin ≤ hmax < 0.5")
    hs = np.array([a.hmin]) if a.hmin == a.hmax else np.linspace(a.hmin, a.hmax, a.grid)
    cols = read_csv(a.data, "ate")
    data = AteSample(cols["y"], cols["d"], cols["e"], cols["mu0"], cols["mu1"])
    band = ate_trim_band(data, hs, a.alpha, n_reps=a.reps, seed=a.seed)
    run.manifest["t_hat"] = repr(band.t_hat)
    run.emit(band.to_csv())


def _cmd_mc(run: _Run) -> None:
    a = run.args
    _check_reps(a.reps, 1)
    _check_order(a.order)
    h0 = a.h0
    if h0 not in ("fixed", "ik"):
        try:
            h0 = _positive("--h0", float(h0))
        except ValueError:
            raise UsageError("--h0", "must be a number, 'fixed' or 'ik'") from None
    cfg = MCConfig(reps=a.reps, seed=a.seed, range_rule=a.range, baseline_h=h0, h_grid_points=a.grid,
                   kernels=[a.kernel], orders=[a.order], varmethods=[a.var], target=a.target,
                   critval_reps=a.critval_reps)
    rows = run_coverage(a.design, cfg)
    run.emit(CoverageRow.HEADER + "\n" + "".join(r.csv() + "\n" for r in rows))


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(self.prog, message)


def _common(p, seed_required=False, default_reps=20_000):
    p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
    p.add_argument("--reps", type=int, default=default_reps)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", default=None, help="output file (directory for tables); stdout if omitted")
    p.add_argument("--manifest", default=None, help="manifest path (default: next to --out, else ./snoopband.manifest)")
    p.add_argument("--cache", default=None, help="critical-value cache CSV")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--grid-per-log", type=int, default=DEFAULT_GRID_PER_LOG)


def _kernel_flags(p):
    p.add_argument("--kernel", default="triangular", help="built-in name or kernel config file")
    p.add_argument("--order", type=int, default=1)


def _band_flags(p):
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--sides", choices=("one", "two"), default="two")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="snoopband", description="Bandwidth-snooping adjusted critical values and bands.")
    parser.add_argument("--version", action="version", version=f"snoopband {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("critval", help="simulate one adjusted critical value")
    _kernel_flags(p)
    _band_flags(p)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--ev-approx", action="store_true", help="extreme-value approximation instead of simulation")
    _common(p)
    p.set_defaults(func=_cmd_critval)

    p = sub.add_parser("tables", help="tabulate critical values")
    p.add_argument("--preset", choices=("table1",), default=None)
    p.add_argument("--kernels", nargs="+", default=["uniform", "triangular"])
    p.add_argument("--orders", nargs="+", type=int, default=[0, 1])
    p.add_argument("--ratios", nargs="+", type=float, default=list(TABLE1_RATIOS))
    p.add_argument("--alphas", nargs="+", type=float, default=[0.05])
    p.add_argument("--richardson", action="store_true", help="report the change from doubling the grid")
    _common(p, seed_required=True, default_reps=100_000)
    p.set_defaults(func=_cmd_tables)

    p = sub.add_parser("rd", help="RD estimate at one bandwidth")
    p.add_argument("--data", required=True)
    _kernel_flags(p)
    p.add_argument("--var", choices=VARIANCE_METHODS[:3], default="nn")
    p.add_argument("--h", type=float, required=True)
    _common(p)
    p.set_defaults(func=_cmd_rd)

    p = sub.add_parser("band", help="RD estimates with pointwise and uniform bands over a bandwidth grid")
    p.add_argument("--data", required=True)
    _kernel_flags(p)
    _band_flags(p)
    p.add_argument("--var", choices=VARIANCE_METHODS[:3], default="nn")
    p.add_argument("--hmin", type=float, required=True)
    p.add_argument("--hmax", type=float, required=True)
    p.add_argument("--grid", type=int, default=100)
    _common(p)
    p.set_defaults(func=_cmd_band)

    p = sub.add_parser("adjust", help="adjust a published estimate and standard error")
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--se", type=float, required=True)
    p.add_argument("--ratio", type=float, required=True)
    _kernel_flags(p)
    _band_flags(p)
    p.add_argument("--critval", type=float, default=None, help="use this critical value instead of simulating")
    p.add_argument("--exclude", type=float, default=None, help="also report the largest ratio excluding this value")
    _common(p)
    p.set_defaults(func=_cmd_adjust)

    p = sub.add_parser("late", help="LATE band over instrument windows")
    p.add_argument("--data", required=True)
    _band_flags(p)
    p.add_argument("--hmin", type=float, required=True)
    p.add_argument("--hmax", type=float, required=True)
    p.add_argument("--grid", type=int, default=20)
    _common(p)
    p.set_defaults(func=_cmd_late)

    p = sub.add_parser("ate-trim", help="trimmed ATE band over trimming levels")
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--hmin", type=float, default=0.0)
    p.add_argument("--hmax", type=float, default=0.1)
    p.add_argument("--grid", type=int, default=21)
    _common(p)
    p.set_defaults(func=_cmd_ate)

    p = sub.add_parser("mc", help="Monte Carlo coverage experiment")
    p.add_argument("--design", type=int, choices=sorted(DESIGNS), default=1)
    p.add_argument("--range", choices=sorted(RANGE_RULES), default="half-to-one")
    _kernel_flags(p)
    p.add_argument("--var", choices=VARIANCE_METHODS, default="exact")
    p.add_argument("--target", choices=("theta_h", "theta_0"), default="theta_h")
    p.add_argument("--h0", default="fixed", help="baseline bandwidth: a number, 'fixed' (calibrated) or 'ik'")
    p.add_argument("--grid", type=int, default=100)
    p.add_argument("--critval-reps", type=int, default=40_000)
    _common(p, seed_required=True, default_reps=2000)
    p.set_defaults(func=_cmd_mc)
    return parser


def _write_manifest(run: _Run, argv: Sequence[str], status: int) -> None:
    a = run.args
    if a.manifest:
        path = Path(a.manifest)
    elif a.out:
        out = Path(a.out)
        path = out / "manifest.txt" if a.command == "tables" else out.with_name(out.name + ".manifest")
    else:
        path = Path("snoopband.manifest")
    entries = {"command": a.command, "version": __version__, "argv": " ".join(argv), "exit_status": str(status)}
    for k, v in sorted(vars(a).items()):
        if k not in ("func",):
            entries[f"flag.{k}"] = repr(v)
    entries["cache_hits"] = str(run.cache.hits)
    entries["cache_misses"] = str(run.cache.misses)
    entries.update(run.manifest)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={v}\n" for k, v in entries.items()), encoding="utf-8")


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if getattr(args, "threads", 1) < 1:
        print("error: --threads: must be at least 1", file=sys.stderr)
        return 2
    run = _Run(args)
    try:
        args.func(run)
        status = 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = 2
    except (SnoopbandError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        status = 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = 2
    _write_manifest(run, argv, status)
    return status


if __name__ == "__main__":
    sys.exit(main())
