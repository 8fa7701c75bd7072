import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffest.errors import ConfigError
from diffest.stats_bounds import (
    ConcentrationCheck, chi2_tail, fit_linear, fit_rate, sample_mean_concentration,
)


def test_chi2_tail_example():
    assert chi2_tail(2000, 0.1) == pytest.approx(2 * math.exp(-2.5), rel=1e-14)
    assert chi2_tail(2000, 0.1) == pytest.approx(0.164170, abs=1e-6)


def test_chi2_tail_vacuous_at_zero():
    assert chi2_tail(10, 0.0) == 2.0


@pytest.mark.parametrize("dof,gamma", [(0, 0.1), (2.5, 0.1), (10, 1.0), (10, -0.1)])
def test_chi2_tail_domain(dof, gamma):
    with pytest.raises(ConfigError):
        chi2_tail(dof, gamma)


@given(st.integers(1, 10**6), st.integers(1, 10**6), st.floats(0.001, 0.999))
def test_chi2_tail_monotone_in_dof(a, b, gamma):
    lo, hi = sorted((a, b))
    assert chi2_tail(hi, gamma) <= chi2_tail(lo, gamma)


@given(st.integers(1, 10**4), st.floats(0.0, 0.999), st.floats(0.0, 0.999))
def test_chi2_tail_monotone_in_gamma(dof, g1, g2):
    lo, hi = sorted((g1, g2))
    assert chi2_tail(dof, hi) <= chi2_tail(dof, lo)


@pytest.mark.parametrize("dof", [50, 2000])
def test_chi2_tail_dominates_sampled_tail(dof):
    s = np.random.default_rng(dof).chisquare(dof, size=100_000) / dof
    for gamma in (0.05, 0.1, 0.2):
        assert np.mean(np.abs(s - 1) > gamma) <= chi2_tail(dof, gamma)


def test_concentration_zero_samples_pass():
    chk = sample_mean_concentration(np.zeros((10, 100)), 1.0)
    assert chk.empirical_frequency == 0.0 and chk.passed


def test_concentration_gaussian():
    z = np.random.default_rng(0).standard_normal((1000, 10_000))
    chk = sample_mean_concentration(z, 1.0, C_alpha=1.0, alpha=1.0)
    assert chk.threshold == pytest.approx(math.log(1e4) / 100, rel=1e-12)
    assert chk.threshold == pytest.approx(9.21e-2, abs=1e-4)
    assert chk.empirical_frequency <= 5e-4
    assert chk.passed and chk.sample_count == 1000


def test_concentration_shift_fails():
    chk = sample_mean_concentration(np.ones((20, 100)), 1.0)
    assert chk.empirical_frequency == 1.0 and not chk.passed


def test_concentration_errors_and_serialization():
    with pytest.raises(ConfigError):
        sample_mean_concentration(np.array([]), 1.0)
    with pytest.raises(ConfigError):
        ConcentrationCheck.compare([], 0.1, 0.5)
    chk = ConcentrationCheck.compare([True, False, False, False], 0.1, 0.1)
    assert chk.to_dict() == {"sample_count": 4, "threshold": 0.1, "empirical_frequency": 0.25,
                             "theoretical_bound": 0.1, "passed": True}
    # 0.25 <= 0.1 + 3 sqrt(0.1/4) = 0.574


def test_fit_rate_power_law():
    xs = np.array([1.0, 10.0, 100.0, 1000.0])
    fit = fit_rate(xs, xs**-2.0)
    assert fit.slope == pytest.approx(-2.0, abs=1e-12)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit_rate(xs, np.full(4, 3.0)).slope == pytest.approx(0.0, abs=1e-12)


def test_fit_rate_noisy():
    rng = np.random.default_rng(0)
    xs = np.logspace(1, 4, 8)
    for _ in range(20):
        ys = xs**-0.5 * (1 + 0.01 * rng.standard_normal(8))
        assert abs(fit_rate(xs, ys).slope + 0.5) <= 0.05


@given(st.floats(1e-6, 1e6))
def test_fit_rate_scale_invariance(c):
    xs = np.array([1.0, 2.0, 5.0, 11.0])
    ys = np.array([3.0, 1.1, 0.7, 0.2])
    a, b = fit_rate(xs, ys), fit_rate(xs, c * ys)
    assert b.slope == pytest.approx(a.slope, rel=1e-9, abs=1e-12)
    assert b.intercept == pytest.approx(a.intercept + math.log(c), rel=1e-9, abs=1e-9)


def test_fit_errors():
    with pytest.raises(ConfigError):
        fit_rate([1, 2, 3], [1, 0, 2])
    with pytest.raises(ConfigError):
        fit_rate([1, 2], [1, 2])
    with pytest.raises(ConfigError):
        fit_linear([1, 2, 3], [1, 2])
