"""Conversions between the v, epsilon, x0 and score parametrizations.

All functions take ``t`` in ``0..T``; ``t = 0`` is the clean state with
``alpha_bar = 1``. Arithmetic is float64 regardless of input dtype.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, DomainError
from .schedule import NoiseSchedule


def _ab(s: NoiseSchedule, t: int) -> float:
    if not 0 <= t <= s.T:
        raise IndexError(f"timestep {t} outside 0..{s.T}")
    return float(s.alpha_bar[t])


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def forward_mix(x0, eps, s: NoiseSchedule, t: int) -> np.ndarray:
    """x_t = sqrt(ab) x0 + sqrt(1 - ab) eps."""
    x0, eps = _pair(x0, eps)
    ab = _ab(s, t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def velocity(x0, eps, s: NoiseSchedule, t: int) -> np.ndarray:
    """Target v = sqrt(ab) eps - sqrt(1 - ab) x0."""
    x0, eps = _pair(x0, eps)
    ab = _ab(s, t)
    return math.sqrt(ab) * eps - math.sqrt(1.0 - ab) * x0


def v_to_x0(x_t, v, s: NoiseSchedule, t: int) -> np.ndarray:
    x_t, v = _pair(x_t, v)
    ab = _ab(s, t)
    return math.sqrt(ab) * x_t - math.sqrt(1.0 - ab) * v


def v_to_epsilon(x_t, v, s: NoiseSchedule, t: int) -> np.ndarray:
    """Noise estimate from a v-prediction, evaluated term by term as

        v / sqrt(ab) + sqrt(1/ab - 1) * (sqrt(ab) x_t - sqrt(1 - ab) v)

    which simplifies to sqrt(1 - ab) x_t + sqrt(ab) v.
    """
    x_t, v = _pair(x_t, v)
    ab = _ab(s, t)
    if ab <= 0.0:
        raise DomainError("alpha_bar must be positive")
    rab = math.sqrt(ab)
    return v / rab + math.sqrt(1.0 / ab - 1.0) * (rab * x_t - math.sqrt(1.0 - ab) * v)


def epsilon_to_v(x_t, eps, s: NoiseSchedule, t: int) -> np.ndarray:
    x_t, eps = _pair(x_t, eps)
    ab = _ab(s, t)
    if ab <= 0.0:
        raise DomainError("alpha_bar must be positive")
    return (eps - math.sqrt(1.0 - ab) * x_t) / math.sqrt(ab)


def epsilon_to_score(eps, s: NoiseSchedule, t: int) -> np.ndarray:
    sigma = math.sqrt(1.0 - _ab(s, t))
    if sigma == 0.0:
        raise DomainError("score undefined at sigma_t = 0")
    return -np.asarray(eps, dtype=np.float64) / sigma


def score_to_epsilon(score, s: NoiseSchedule, t: int) -> np.ndarray:
    sigma = math.sqrt(1.0 - _ab(s, t))
    if sigma == 0.0:
        raise DomainError("score undefined at sigma_t = 0")
    return -sigma * np.asarray(score, dtype=np.float64)


def assemble_guided_epsilon(base_eps, grad_g, nu: float, s: NoiseSchedule, t: int) -> np.ndarray:
    """eps_hat = base_eps + nu * sigma_t * grad_g."""
    base_eps, grad_g = _pair(base_eps, grad_g)
    sigma = math.sqrt(1.0 - _ab(s, t))
    return base_eps + (nu * sigma) * grad_g
