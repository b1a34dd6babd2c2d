import logging
import math

import numpy as np
import pytest

from pfode import parametrize as pz
from pfode.denoise import NULL_CONDITION, MixtureDenoiser, MixtureModel
from pfode.errors import ConfigError, DimensionError, DomainError
from pfode.guide import GuidanceSpec, appearance, build_template, energy_g, grad_g
from pfode.schedule import linear_schedule
from pfode.volcore import masked_mean

S = linear_schedule()


def _mixture(shape=(8, 8, 8), k=3, seed=0, tau2=0.02):
    rng = np.random.default_rng(seed)
    means = 1.0 + 0.2 * rng.normal(size=(k, *shape))
    return MixtureDenoiser(MixtureModel(np.full(k, 1.0 / k), means, tau2), S)


def _shape(n=8):
    m = np.zeros((n, n, n))
    m[1:-1, 1:-1, 2:-2] = 1
    return m


def test_build_template():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(4, 4, 4))
    np.testing.assert_array_equal(build_template([v]), v)
    assert np.all(build_template([v, -v]) == 0)
    vols = [rng.normal(size=(4, 4, 4)) for _ in range(3)]
    oracle = np.zeros((4, 4, 4))
    for i in np.ndindex(4, 4, 4):
        oracle[i] = math.fsum(float(a[i]) for a in vols) / 3
    assert np.max(np.abs(build_template(vols) - oracle)) <= 1e-6
    with pytest.raises(DomainError):
        build_template([])
    with pytest.raises(DimensionError):
        build_template([v, np.zeros((4, 4, 5))])


def test_appearance_examples():
    m = _shape()
    assert appearance(np.full((8, 8, 8), 2.5), m) == 2.5
    v = np.random.default_rng(1).normal(size=(8, 8, 8))
    assert appearance(v, np.ones((8, 8, 8))) == pytest.approx(v.mean(), abs=1e-14)
    checker = 2.0 * (np.indices((4, 4, 4)).sum(axis=0) % 2)
    assert appearance(checker, np.ones((4, 4, 4))) == 1.0
    two = np.stack([v, 2 * v])
    a = appearance(two, m)
    assert a.shape == (2,) and a[1] == pytest.approx(2 * a[0])
    with pytest.raises(DomainError):
        appearance(v, np.zeros((8, 8, 8)))


def test_spec_validation():
    t = np.zeros((4, 4, 4))
    with pytest.raises(DomainError):
        GuidanceSpec(t, np.zeros((4, 4, 4)))
    with pytest.raises(DomainError):
        GuidanceSpec(t, np.full((4, 4, 4), 0.5))
    with pytest.raises(DimensionError):
        GuidanceSpec(t, np.ones((4, 4, 5)))
    with pytest.raises(ConfigError):
        GuidanceSpec(t, np.ones((4, 4, 4)), nu=-1)
    with pytest.raises(ConfigError):
        GuidanceSpec(t, np.ones((4, 4, 4)), grad_mode="adjoint")


def test_energy_zero_for_template_consistent_state():
    # point-mass oracle at the template: x0-hat equals the template at small t
    tmpl = 1.0 + 0.1 * np.random.default_rng(2).normal(size=(8, 8, 8))
    den = MixtureDenoiser(MixtureModel(np.array([1.0]), tmpl[None], 1e-12), S)
    spec = GuidanceSpec(tmpl, _shape())
    x_t = math.sqrt(S.alpha_bar[1]) * tmpl
    assert energy_g(x_t, 1, spec, den, NULL_CONDITION, S) <= 1e-6


def test_energy_single_channel_difference():
    tmpl = np.zeros((4, 4, 4))
    den = MixtureDenoiser(MixtureModel(np.array([1.0]), np.full((1, 4, 4, 4), 0.3), 1e-12), S)
    spec = GuidanceSpec(tmpl, np.ones((4, 4, 4)))
    x_t = math.sqrt(S.alpha_bar[1]) * np.full((4, 4, 4), 0.3)
    assert energy_g(x_t, 1, spec, den, NULL_CONDITION, S) == pytest.approx(0.3, abs=1e-8)


def test_energy_composition_oracle():
    den = _mixture()
    rng = np.random.default_rng(3)
    tmpl = 1.0 + 0.1 * rng.normal(size=(8, 8, 8))
    m = _shape()
    spec = GuidanceSpec(tmpl, m)
    for t in (20, 400, 900):
        x_t = rng.normal(size=(8, 8, 8))
        x0 = pz.v_to_x0(x_t, den.predict_v(x_t, t), S, t)
        oracle = abs(masked_mean(x0, m) - masked_mean(tmpl, m))
        g = energy_g(x_t, t, spec, den, NULL_CONDITION, S)
        assert g >= 0 and abs(g - oracle) <= 1e-8


def test_grad_zero_at_kink(caplog):
    den = _mixture()
    x_t = np.random.default_rng(4).normal(size=(8, 8, 8))
    t = 300
    m = _shape()
    x0 = pz.v_to_x0(x_t, den.predict_v(x_t, t), S, t)
    # x0-hat itself as the template puts the energy exactly at the kink
    spec = GuidanceSpec(x0, m)
    assert energy_g(x_t, t, spec, den, NULL_CONDITION, S) == 0.0
    with caplog.at_level(logging.DEBUG, logger="pfode.guide"):
        g = grad_g(x_t, t, spec, den, NULL_CONDITION, S)
    assert np.all(g == 0)
    assert "kink" in caplog.text


def test_stop_gradient_closed_form():
    den = _mixture()
    m = _shape()
    spec = GuidanceSpec(np.zeros((8, 8, 8)), m, grad_mode="stop_gradient")
    x_t = np.random.default_rng(5).normal(size=(8, 8, 8))
    t = 500
    g = grad_g(x_t, t, spec, den, NULL_CONDITION, S)
    # x0-hat sits near 1 while the template is 0, so the sign is +
    np.testing.assert_array_equal(g, math.sqrt(S.alpha_bar[t]) * (m / m.sum()))
    assert np.all(g[m == 0] == 0)


def test_full_grad_matches_central_differences():
    den = _mixture()
    rng = np.random.default_rng(6)
    m = _shape()
    spec = GuidanceSpec(np.full((8, 8, 8), 0.5), m)
    t = 400
    x_t = math.sqrt(S.alpha_bar[t]) * den.model.means[0] + S.sigma[t] * rng.normal(size=(8, 8, 8))
    g = grad_g(x_t, t, spec, den, NULL_CONDITION, S)
    h = 1e-3
    fd = np.zeros_like(x_t)
    for i in np.ndindex(x_t.shape):
        e = np.zeros_like(x_t)
        e[i] = h
        fd[i] = (energy_g(x_t + e, t, spec, den, NULL_CONDITION, S)
                 - energy_g(x_t - e, t, spec, den, NULL_CONDITION, S)) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-4


def test_guidance_window_and_weight():
    spec = GuidanceSpec(np.zeros((2, 2, 2)), np.ones((2, 2, 2)), nu=0.5, t_range=(10, 20))
    assert spec.weight == 0.5 * 8
    assert spec.active(10) and spec.active(20) and not spec.active(21) and not spec.active(9)
    assert GuidanceSpec(np.zeros((2, 2, 2)), np.ones((2, 2, 2))).active(1000)
