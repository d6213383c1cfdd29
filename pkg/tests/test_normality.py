import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from pqlmm.normality import UnsupportedSizeError, shapiro_wilk, shapiro_wilk_statistic


@pytest.mark.parametrize("n", [3, 4, 5, 6, 7, 11, 12, 20, 50, 200, 1000, 5000])
def test_matches_reference_implementation(n):
    rng = np.random.default_rng(n)
    for x in (rng.standard_normal(n), rng.exponential(size=n)):
        w, p = shapiro_wilk_statistic(x)
        ref = stats.shapiro(x)
        assert w == pytest.approx(ref.statistic, abs=1e-6)
        assert p == pytest.approx(ref.pvalue, abs=1e-5)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=60))
@settings(max_examples=100, deadline=None)
def test_statistic_is_in_unit_interval_and_location_scale_free(values):
    x = np.array(values)
    if np.ptp(x) < 1e-6 * max(1.0, np.abs(x).max()):
        return
    w, p = shapiro_wilk_statistic(x)
    assert 0 < w <= 1 + 1e-12 and 0 <= p <= 1
    w2, _ = shapiro_wilk_statistic(3.0 * x + 7.0)
    assert w2 == pytest.approx(w, abs=1e-9)


def test_rejection_rate_is_calibrated_under_normality():
    rng = np.random.default_rng(2024)
    pvals = np.array([shapiro_wilk(rng.standard_normal(1000)) for _ in range(500)])
    assert 0.03 <= np.mean(pvals < 0.05) <= 0.07


def test_lognormal_sample_is_rejected():
    rng = np.random.default_rng(1)
    assert shapiro_wilk(np.exp(rng.standard_normal(1000))) < 1e-6


def test_degenerate_and_out_of_range_samples():
    with pytest.raises(ValueError):
        shapiro_wilk(np.ones(50))
    with pytest.raises(UnsupportedSizeError):
        shapiro_wilk([1.0, 2.0])
    with pytest.raises(UnsupportedSizeError):
        shapiro_wilk(np.arange(5001.0))
    with pytest.raises(ValueError):
        shapiro_wilk([1.0, np.nan, 2.0])
