import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfode import parametrize as pz
from pfode.errors import ConfigError, DomainError
from pfode.schedule import NoiseSchedule, drift_disc, g1_sq, g2_sq, g2_sq_from_alpha, linear_schedule


def test_linear_schedule_examples():
    s = linear_schedule(1000, 1e-4, 0.02)
    assert s.alpha[1] == pytest.approx(0.9999, abs=1e-15)
    assert s.alpha_bar[1] == s.alpha[1]
    assert s.alpha_bar[0] == 1.0
    s2 = linear_schedule(2, 0.1, 0.2)
    assert s2.alpha_bar[2] == pytest.approx(0.72, abs=1e-15)


def test_linear_schedule_invariants():
    s = linear_schedule()
    b = s.beta[1:]
    assert np.all((b > 0) & (b < 1)) and np.all(np.diff(b) > 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < 0.05
    assert np.all(np.diff(s.sigma) > 0)
    assert b[0] == 1e-4 and b[-1] == 0.02


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.02, 1e-4), (10, 0.0, 0.1), (10, 0.1, 1.0)])
def test_linear_schedule_rejects_bad_config(args):
    with pytest.raises(ConfigError):
        linear_schedule(*args)


def test_g1_examples():
    s = linear_schedule(2, 0.1, 0.2)
    assert g1_sq(s, 1) == 0.0
    assert g1_sq(s, 2) == pytest.approx((1 - 0.9) / (1 - 0.72) * 0.2, abs=1e-15)
    assert g1_sq(s, 2) == pytest.approx(0.0714285714285, abs=1e-12)
    with pytest.raises(IndexError):
        g1_sq(s, 0)
    with pytest.raises(IndexError):
        g1_sq(s, 3)


def test_g2_examples():
    s = linear_schedule(2, 0.1, 0.2)
    assert g2_sq(s, 2) == pytest.approx(0.2 / math.sqrt(0.8), abs=1e-15)
    assert g2_sq(s, 2) == pytest.approx(0.2236067977, abs=1e-9)
    assert g2_sq_from_alpha(1.0) == 0.0
    with pytest.raises(DomainError):
        g2_sq_from_alpha(0.0)


def test_coefficient_bounds_all_t():
    s = linear_schedule()
    for t in range(1, s.T + 1):
        assert g1_sq(s, t) <= 1 - s.alpha[t]
        assert g2_sq(s, t) >= 1 - s.alpha[t]
        assert g1_sq(s, t) <= g2_sq(s, t)


random_schedules = st.lists(st.floats(1e-5, 0.3), min_size=3, max_size=60, unique=True).map(
    lambda b: NoiseSchedule.from_betas(sorted(b))
)


@settings(max_examples=100)
@given(random_schedules)
def test_coefficient_identity(s):
    ab = s.alpha_bar
    for t in range(2, s.T + 1):
        lhs = (1 - ab[t]) / (1 - ab[t - 1]) * (1 / math.sqrt(s.alpha[t])) * g1_sq(s, t)
        assert abs(lhs - g2_sq(s, t)) <= 1e-12


def test_drift_examples():
    s = linear_schedule()
    assert np.all(drift_disc(s, 5, np.zeros((2, 2, 2))) == 0)
    x = np.random.default_rng(0).normal(size=(3, 3, 3))
    np.testing.assert_allclose(x - drift_disc(s, 7, x), x / math.sqrt(s.alpha[7]), rtol=1e-15)


def test_drift_reproduces_ddpm_posterior_mean():
    # x/sqrt(a) + G2^2 S with S = -eps/sigma equals (x - beta/sigma eps)/sqrt(a)
    s = linear_schedule()
    rng = np.random.default_rng(1)
    for t in (2, 50, 500, 1000):
        x = rng.normal(size=(4, 4, 4))
        eps = rng.normal(size=(4, 4, 4))
        score = -eps / math.sqrt(1 - s.alpha_bar[t])
        ours = x - drift_disc(s, t, x) + g2_sq(s, t) * score
        ddpm = (x - (1 - s.alpha[t]) / math.sqrt(1 - s.alpha_bar[t]) * eps) / math.sqrt(s.alpha[t])
        assert np.max(np.abs(ours - ddpm)) <= 1e-5


def test_forward_noising_preserves_variance():
    s = linear_schedule()
    rng = np.random.default_rng(2)
    n = 200_000
    x0 = rng.normal(0.0, 2.0, size=n)
    for t in (10, 300, 900):
        xt = pz.forward_mix(x0, rng.standard_normal(n), s, t)
        expected = s.alpha_bar[t] * 4.0 + (1 - s.alpha_bar[t])
        # standard error of a sample variance of a Gaussian: var * sqrt(2/(n-1))
        se = expected * math.sqrt(2.0 / (n - 1))
        assert abs(xt.var(ddof=1) - expected) <= 3 * se


def test_ancestral_approximation_error_shrinks_with_T():
    # the dropped factor (1-ab_t)/(1-ab_{t-1}) / sqrt(a_t) tends to 1 as T grows
    worst = []
    for T in (100, 400, 1600):
        s = linear_schedule(T, 1e-4 * 1000 / T, 0.02 * 1000 / T)
        f = [(1 - s.alpha_bar[t]) / (1 - s.alpha_bar[t - 1]) / math.sqrt(s.alpha[t]) for t in range(T // 10, T + 1)]
        worst.append(max(abs(v - 1) for v in f))
    assert worst[0] > worst[1] > worst[2]
