import math

import numpy as np
import pytest
from scipy import integrate

from snoopband.kernels import builtin
from snoopband.locpoly import RDSample, rd_sharp
from snoopband.mc import (
    BASELINE_H,
    DESIGNS,
    DesignSpec,
    MCConfig,
    gen_sample,
    ik_bandwidth,
    run_coverage,
    theta_h_true,
    x_density,
)


def test_density_matches_beta_transform():
    from scipy.stats import beta

    x = np.linspace(-0.99, 0.99, 41)
    np.testing.assert_allclose(x_density(x), 0.5 * beta(2, 4).pdf((x + 1) / 2), atol=1e-12)
    assert integrate.quad(lambda v: float(x_density(v)), -1, 1)[0] == pytest.approx(1.0, abs=1e-10)
    assert x_density(1.5) == 0.0


def test_theta0_jumps():
    assert DESIGNS[1].theta0 == pytest.approx(0.04)
    assert DESIGNS[2].theta0 == pytest.approx(0.10)
    assert theta_h_true(1, 1e-3) == pytest.approx(0.04, abs=1e-4)
    assert theta_h_true(2, 1e-3) == pytest.approx(0.10, abs=1e-4)


def test_sample_mean_of_g():
    d = DESIGNS[1]
    s = gen_sample(d, n=1_000_000, seed=3)
    expect = integrate.quad(lambda v: float(d.g(v) * x_density(v)), -1, 0)[0] + \
        integrate.quad(lambda v: float(d.g(v) * x_density(v)), 0, 1)[0]
    assert s.y.mean() == pytest.approx(expect, abs=4 * 0.5 / math.sqrt(1e6))
    assert s.x.min() >= -1 and s.x.max() <= 1


def test_errors_follow_design_sd():
    for k in (3, 4):
        d = DESIGNS[k]
        s = gen_sample(d, n=200_000, seed=1)
        z = (s.y - d.g(s.x)) / d.sd(s.x)
        assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_theta_h_linear_g_is_constant():
    lin = DesignSpec(99, (0.1, 2.0), (0.5, -1.0))
    for h in (0.05, 0.3, 0.9, 1.5):
        assert theta_h_true(lin, h) == pytest.approx(0.4, abs=1e-12)
        assert theta_h_true(lin, h, "uniform", 1) == pytest.approx(0.4, abs=1e-12)


def _quad_intercept(d, side, h, r, name):
    k = builtin(name)
    sign = 1.0 if side == "upper" else -1.0
    top = min(h, 1.0)

    def w(u):
        return float(k(u / h) * x_density(sign * u))

    G = np.array([[integrate.quad(lambda u: w(u) * (u / h) ** (i + j), 0, top, limit=200)[0]
                   for j in range(r + 1)] for i in range(r + 1)])
    b = np.array([integrate.quad(lambda u: w(u) * (u / h) ** i * float(d.g(sign * u)), 0, top, limit=200)[0]
                  for i in range(r + 1)])
    return np.linalg.solve(G, b)[0]


@pytest.mark.parametrize("design,h,name,r", [(1, 0.3, "triangular", 1), (2, 0.6, "uniform", 1),
                                              (1, 1.4, "triangular", 2), (3, 0.2, "triangular", 0)])
def test_theta_h_against_quad(design, h, name, r):
    d = DESIGNS[design]
    oracle = _quad_intercept(d, "upper", h, r, name) - _quad_intercept(d, "lower", h, r, name)
    assert theta_h_true(d, h, name, r) == pytest.approx(oracle, abs=1e-8)


def test_noise_free_large_sample_converges():
    d = DESIGNS[1]
    s = gen_sample(d, n=400_000, seed=2)
    clean = RDSample(s.x, d.g(s.x))
    for h in (0.2, 0.4):
        est = rd_sharp(clean, h, 1, "triangular").theta_hat
        assert est == pytest.approx(theta_h_true(d, h), abs=2e-3)


def test_gen_sample_reproducible():
    a = gen_sample(1, seed=5, rep=17)
    b = gen_sample(1, seed=5, rep=17)
    c = gen_sample(1, seed=5, rep=18)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    assert not np.array_equal(a.x, c.x)


def test_ik_bandwidth_sane():
    hs = [ik_bandwidth(gen_sample(1, seed=9, rep=i)) for i in range(30)]
    assert 0.1 < np.median(hs) < 0.8
    assert np.median(hs) == pytest.approx(BASELINE_H[1], rel=0.35)


def test_run_coverage_small():
    cfg = MCConfig(reps=60, seed=3, critval_reps=4000)
    rows = run_coverage(1, cfg)
    assert len(rows) == 1
    row = rows[0]
    assert row.adjusted >= row.naive
    assert row.critval > 1.96
    assert row.reps_ok + row.failures == 60
    assert row.pointwise_min <= row.pointwise_max
    again = run_coverage(1, cfg)[0]
    assert again == row
    assert row.csv().count(",") == row.HEADER.count(",")


def test_run_coverage_degenerate_grid():
    cfg = MCConfig(reps=40, seed=4, h_grid_points=1, critval_reps=20_000, varmethods=("ehw",))
    row = run_coverage(2, cfg)[0]
    # a single bandwidth: the uniform band is the pointwise band
    assert row.critval == pytest.approx(1.96, abs=0.03)
    assert row.pointwise_min == row.pointwise_max


def test_config_validation():
    with pytest.raises(ValueError):
        MCConfig(range_rule="all")
    with pytest.raises(ValueError):
        MCConfig(target="theta")
