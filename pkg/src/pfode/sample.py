"""Reverse-process samplers: stochastic ancestral, and the deterministic D1/D2 steppers.

Every step evaluates the denoiser once, turns its v-prediction into a
(possibly guided) noise estimate and then into a score ``S``, and applies

    ancestral:  x_{t-1} = x_t - f + (1-ab_t)/(1-ab_{t-1}) / sqrt(a_t) * G1^2 S + G1 z
    d1:         x_{t-1} = x_t - f + 1/2 G1^2 S
    d2:         x_{t-1} = x_t - f + 1/2 G2^2 S

with the discrete drift ``x_t - f = x_t / sqrt(a_t)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from . import parametrize as pz
from .denoise import NULL_CONDITION, Condition, Denoiser
from .errors import ConfigError
from .schedule import NoiseSchedule, g1_sq, g2_sq

if TYPE_CHECKING:
    from .guide import GuidanceSpec

log = logging.getLogger(__name__)

SAMPLERS = ("ancestral", "d1", "d2")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "d1"
    t_start: int = 400
    seed: int = 0  # ancestral step noise only
    noise_seed: int = 0  # forward noising of the input
    guidance: Optional["GuidanceSpec"] = None

    def __post_init__(self):
        if self.kind not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.kind!r}; choose from {SAMPLERS}")
        if self.t_start < 1:
            raise ConfigError("t_start must be >= 1")


def forward_noise(x0, t: int, s: NoiseSchedule, seed: int) -> np.ndarray:
    s.check(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.random.default_rng(seed).standard_normal(x0.shape)
    return pz.forward_mix(x0, eps, s, t)


def guided_score(x_t, t: int, den: Denoiser, cond: Condition, s: NoiseSchedule, guidance=None) -> np.ndarray:
    """Score from the denoiser's v-prediction, with the template-energy term folded in."""
    v = den.predict_v(x_t, t, cond)
    eps = pz.v_to_epsilon(x_t, v, s, t)
    if guidance is not None and guidance.cfg_scale:
        w = guidance.cfg_scale
        eps_null = pz.v_to_epsilon(x_t, den.predict_v(x_t, t, NULL_CONDITION), s, t)
        eps = (1.0 + w) * eps - w * eps_null
    if guidance is not None and guidance.active(t):
        from .guide import grad_g

        grad = grad_g(x_t, t, guidance, den, cond, s, v=v)
        eps = pz.assemble_guided_epsilon(eps, grad, guidance.weight, s, t)
    return pz.epsilon_to_score(eps, s, t)


def _mean_part(x_t, t: int, s: NoiseSchedule) -> np.ndarray:
    # x - drift_disc(s, t, x) in closed form, which avoids a cancellation
    x = np.asarray(x_t, dtype=np.float64)
    return x / math.sqrt(float(s.alpha[t]))


def ancestral_update(x_t, score, t: int, s: NoiseSchedule, noise=None) -> np.ndarray:
    ab = s.alpha_bar
    g1 = g1_sq(s, t)
    # at t = 1 the ratio is 0/0; the product's limit is G2^2
    coef = (1.0 - ab[t]) / (1.0 - ab[t - 1]) / math.sqrt(s.alpha[t]) * g1 if t > 1 else g2_sq(s, t)
    out = _mean_part(x_t, t, s) + coef * score
    if t > 1 and noise is not None:
        out = out + math.sqrt(g1) * noise
    return out


def d1_update(x_t, score, t: int, s: NoiseSchedule) -> np.ndarray:
    return _mean_part(x_t, t, s) + 0.5 * g1_sq(s, t) * score


def d2_update(x_t, score, t: int, s: NoiseSchedule) -> np.ndarray:
    return _mean_part(x_t, t, s) + 0.5 * g2_sq(s, t) * score


def step_ancestral(x_t, t, den, cond=NULL_CONDITION, s=None, rng=None, guidance=None) -> np.ndarray:
    s = s or den.schedule
    score = guided_score(x_t, t, den, cond, s, guidance)
    noise = None
    if t > 1:
        if rng is None:
            raise ConfigError("ancestral step needs a random generator")
        noise = rng.standard_normal(np.shape(x_t))
    return ancestral_update(x_t, score, t, s, noise)


def step_d1(x_t, t, den, cond=NULL_CONDITION, s=None, guidance=None) -> np.ndarray:
    s = s or den.schedule
    return d1_update(x_t, guided_score(x_t, t, den, cond, s, guidance), t, s)


def step_d2(x_t, t, den, cond=NULL_CONDITION, s=None, guidance=None) -> np.ndarray:
    s = s or den.schedule
    return d2_update(x_t, guided_score(x_t, t, den, cond, s, guidance), t, s)


def run_reverse(
    x_start,
    t_start: int,
    kind: str,
    den: Denoiser,
    cond: Condition = NULL_CONDITION,
    s: Optional[NoiseSchedule] = None,
    seed: int = 0,
    guidance=None,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """Integrate from ``t_start`` down to 0, one step per timestep."""
    s = s or den.schedule
    s.check(t_start)
    x = np.asarray(x_start, dtype=np.float64)
    rng = np.random.default_rng(seed) if kind == "ancestral" else None
    for t in range(t_start, 0, -1):
        if kind == "ancestral":
            x = step_ancestral(x, t, den, cond, s, rng, guidance)
        elif kind == "d1":
            x = step_d1(x, t, den, cond, s, guidance)
        elif kind == "d2":
            x = step_d2(x, t, den, cond, s, guidance)
        else:
            raise ConfigError(f"unknown sampler {kind!r}")
        if callback is not None:
            callback(t - 1, x)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{kind} trajectory diverged")
    return x


def reconstruct(input_latent, cfg: SamplerConfig, den: Denoiser, cond: Condition = NULL_CONDITION,
                s: Optional[NoiseSchedule] = None) -> np.ndarray:
    """Noise the input to ``cfg.t_start`` and integrate back to a pseudo-healthy latent."""
    s = s or den.schedule
    if cfg.t_start > s.T:
        raise ConfigError(f"t_start={cfg.t_start} exceeds T={s.T}")
    x = forward_noise(input_latent, cfg.t_start, s, cfg.noise_seed)
    log.debug("reconstruct kind=%s t_start=%d", cfg.kind, cfg.t_start)
    return run_reverse(x, cfg.t_start, cfg.kind, den, cond, s, cfg.seed, cfg.guidance)
