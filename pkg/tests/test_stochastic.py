import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from hbaforecast.stochastic import (
    Hyperparams,
    ModelParams,
    bias_correct_h,
    invgamma_logpdf,
    poisson_loglik,
    prior_logpdf,
    tn_logpdf,
    tn_mean,
    tn_sample,
)

mpmath.mp.dps = 50


def mp_tn_mean(mu, s2):
    """Truncated-normal mean in 50-digit arithmetic."""
    mu, s = mpmath.mpf(mu), mpmath.sqrt(mpmath.mpf(s2))
    a = mu / s
    pdf = mpmath.npdf(a)
    cdf = mpmath.ncdf(a)
    return float(mu + s * pdf / cdf)


@pytest.mark.parametrize(
    "mu,s2",
    [(0.0, 1.0), (3.0, 0.5), (-2.0, 1.0), (-40.0, 1.0), (-1e3, 4.0), (1e-8, 1e-6),
     (-5.0, 1e-2), (10.0, 100.0), (-38.5, 1.0), (-0.7, 3.3)],
)
def test_tn_mean_against_high_precision(mu, s2):
    assert math.isclose(tn_mean(mu, s2), mp_tn_mean(mu, s2), rel_tol=1e-12)


@given(st.floats(-50, 50), st.floats(1e-3, 1e3))
def test_tn_mean_positive_and_above_location(mu, s2):
    m = tn_mean(mu, s2)
    assert m > 0 and m >= mu


@given(st.floats(1e-5, 1e5), st.floats(1e-5, 1e5))
def test_h_inverts_tn_mean(a, s2):
    assert math.isclose(tn_mean(bias_correct_h(a, s2), s2), a, rel_tol=1e-10)


def test_h_clamp_and_nonpositive_target():
    assert bias_correct_h(0.0, 1.0) == -math.inf
    assert bias_correct_h(1e-9, 1.0, eps=1e-6) == 1e-6
    mu = bias_correct_h(5.0, 1.0, eps=1e-6)
    assert math.isclose(tn_mean(mu, 1.0), 5.0, rel_tol=1e-12)
    with pytest.raises(ValueError):
        bias_correct_h(1.0, 0.0)


@pytest.mark.parametrize("loc,s2", [(1.0, 1.0), (-3.0, 0.5), (1e-6, 2.0), (-30.0, 1.0)])
def test_tn_logpdf_integrates_to_one(loc, s2):
    s = math.sqrt(s2)
    lo, hi = 0.0, max(loc, 0.0) + 40 * s
    total, _ = integrate.quad(lambda x: math.exp(tn_logpdf(x, loc, s2)), lo, hi, limit=200,
                              points=[max(loc, 0.0) + s / abs(min(loc, -1.0))])
    assert math.isclose(total, 1.0, rel_tol=1e-7)
    assert tn_logpdf(-1e-9, loc, s2) == -math.inf


def test_tn_logpdf_matches_scipy():
    x = np.linspace(0, 5, 11)
    ref = stats.truncnorm.logpdf(x, -0.8 / 1.5, np.inf, loc=0.8, scale=1.5)
    assert np.allclose(tn_logpdf(x, 0.8, 1.5**2), ref, atol=1e-12)


@pytest.mark.parametrize("loc,s2", [(2.0, 1.0), (-1.0, 1.0), (-6.0, 0.25)])
def test_tn_sample_ks_against_scipy(loc, s2):
    rng = np.random.default_rng(0)
    x = tn_sample(rng, loc, s2, size=20000)
    s = math.sqrt(s2)
    ref = stats.truncnorm(-loc / s, np.inf, loc=loc, scale=s)
    assert (x >= 0).all()
    assert stats.kstest(x, ref.cdf).pvalue > 0.01


def test_poisson_loglik_matches_scipy(rng):
    lam = rng.uniform(0.1, 20, (4, 5))
    y = rng.poisson(lam)
    assert math.isclose(poisson_loglik(y, lam), stats.poisson.logpmf(y, lam).sum(), rel_tol=1e-12)
    assert poisson_loglik(np.array([1.0]), np.array([0.0])) == -math.inf
    with pytest.warns(RuntimeWarning):
        v = poisson_loglik(np.array([0.0]), np.array([0.0]))
    assert v == pytest.approx(-1e-12)


@given(st.floats(1e-4, 1e4), st.floats(0.01, 10), st.floats(0.01, 10))
def test_invgamma_matches_scipy(x, a, b):
    ref = stats.invgamma.logpdf(x, a, scale=b)
    assert math.isclose(invgamma_logpdf(x, a, b), ref, rel_tol=1e-9, abs_tol=1e-9)


def test_prior_support():
    h = Hyperparams(q_min=2, q_max=4, m_min=1, m_max=3)
    p = ModelParams(2, 3, 0.1, 0.5)
    lp = prior_logpdf(p, h)
    expect = (-math.log(3) - math.log(3) + invgamma_logpdf(0.1, h.a1, h.b1)
              + invgamma_logpdf(0.5, h.a2, h.b2))
    assert math.isclose(lp, expect)
    assert prior_logpdf(ModelParams(4, 3, 0.1, 0.5), h) == -math.inf
    assert prior_logpdf(ModelParams(2, 5, 0.1, 0.5), h) == -math.inf
    assert prior_logpdf(ModelParams(2, 3, -0.1, 0.5), h) == -math.inf
    assert prior_logpdf(ModelParams(2, 3, 0.1, 0.5, k_nn=7), h) == -math.inf
    with pytest.raises(ValueError):
        Hyperparams(q_min=5, q_max=4)
