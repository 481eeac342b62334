"""Bandwidth-snooping adjusted critical values and uniform confidence bands."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .kernels import (
    BUILTIN_KERNELS,
    EquivalentKernel,
    KernelSpec,
    Piece,
    builtin,
    equivalent_kernel,
    ev_constants,
    get_kernel,
    gp_correlation,
    kernel_moment,
    l2_norm_sq,
    load_kernel_config,
    overlap,
    parse_kernel_config,
)
from .gp_critval import (
    CritValRequest,
    CritValResult,
    GridSpec,
    build_covariance,
    critical_value,
    emit_table,
    ev_approx_critval,
    simulate_sup,
    uncorrected_coverage,
)
from .locpoly import RDEstimate, RDSample, LocPolyFit, fit_one_side, rd_curve, rd_fuzzy, rd_sharp, variance
from .bands import (
    CritValCurve,
    EstimateCurve,
    UniformBand,
    band_overlap_report,
    sensitivity_ratio,
    snooping_adjusted_ci,
    uniform_band,
)
from .treatment import (
    AteSample,
    LateSample,
    ate_band_from_summaries,
    ate_trim_band,
    late_band,
    late_estimate,
    trim_that,
)
from .mc import DESIGNS, MCConfig, gen_sample, run_coverage, theta_h_true
