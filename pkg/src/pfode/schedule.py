"""Discrete variance-preserving noise schedule.

Arrays are indexed by timestep with index 0 reserved for the clean state:
``alpha_bar[0] == 1`` and ``beta[0] == 0``, so ``t`` runs over ``1..T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        b = np.asarray(betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 2:
            raise ConfigError("need at least two betas")
        if not (np.all(b > 0) and np.all(b < 1)):
            raise ConfigError("betas must lie in (0, 1)")
        if not np.all(np.diff(b) > 0):
            raise ConfigError("betas must be strictly increasing")
        beta = np.concatenate([[0.0], b])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        sigma = np.sqrt(1.0 - alpha_bar)
        for arr in (beta, alpha, alpha_bar, sigma):
            arr.setflags(write=False)
        return cls(beta, alpha, alpha_bar, sigma)

    def check(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside 1..{self.T}")
        return int(t)

    def bucket(self, t: int, n_buckets: int) -> int:
        """Index of the equal-width bucket of ``1..T`` holding ``t``."""
        return (self.check(t) - 1) * n_buckets // self.T


def linear_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_1 < beta_T < 1.0:
        raise ConfigError(f"need 0 < beta_1 < beta_T < 1, got {beta_1}, {beta_T}")
    return NoiseSchedule.from_betas(np.linspace(beta_1, beta_T, T))


def g1_sq(s: NoiseSchedule, t: int) -> float:
    """Squared ancestral (posterior) noise coefficient."""
    t = s.check(t)
    ab = s.alpha_bar
    return float((1.0 - ab[t - 1]) / (1.0 - ab[t]) * (1.0 - s.alpha[t]))


def g2_sq(s: NoiseSchedule, t: int) -> float:
    t = s.check(t)
    return g2_sq_from_alpha(float(s.alpha[t]))


def g2_sq_from_alpha(alpha: float) -> float:
    if not 0.0 < alpha <= 1.0:
        raise DomainError(f"alpha={alpha} outside (0, 1]")
    return (1.0 - alpha) / math.sqrt(alpha)


def drift_disc(s: NoiseSchedule, t: int, x: np.ndarray) -> np.ndarray:
    """Discrete drift f(x, t) with x - f(x, t) = x / sqrt(alpha_t)."""
    t = s.check(t)
    return (1.0 - 1.0 / math.sqrt(s.alpha[t])) * np.asarray(x, dtype=np.float64)
