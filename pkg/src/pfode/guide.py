"""Template-intensity guidance.

The energy compares the shape-masked mean of the denoiser's current clean
estimate with that of the healthy template,

    g(x_t) = sum_c | appearance(x0_hat(x_t))_c - appearance(template)_c |,

and its gradient enters the noise estimate as ``weight * sigma_t * grad g``
with ``weight = nu * sum(shape)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import parametrize as pz
from .denoise import Condition, Denoiser
from .errors import ConfigError, DimensionError, DomainError
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

GRAD_MODES = ("full", "stop_gradient")


@dataclass(frozen=True, eq=False)
class GuidanceSpec:
    template: np.ndarray
    shape: np.ndarray
    nu: float = 1.0
    grad_mode: str = "full"
    cfg_scale: float = 0.0
    # inclusive timestep window; None applies guidance at every step
    t_range: Optional[tuple[int, int]] = None
    template_appearance: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        tmpl = np.asarray(self.template, dtype=np.float64)
        shape = np.asarray(self.shape, dtype=np.float64)
        if tmpl.shape[-3:] != shape.shape:
            raise DimensionError(f"template {tmpl.shape} and shape mask {shape.shape} differ")
        if not np.all((shape == 0.0) | (shape == 1.0)):
            raise DomainError("shape mask must be binary")
        if not shape.any():
            raise DomainError("shape mask is empty")
        if self.nu < 0:
            raise ConfigError("nu must be nonnegative")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(f"grad_mode must be one of {GRAD_MODES}")
        object.__setattr__(self, "template", tmpl)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "template_appearance", np.atleast_1d(appearance(tmpl, shape)))

    @property
    def weight(self) -> float:
        """Multiplier of ``sigma_t * grad g`` in the sampler.

        ``nu`` is given per shape voxel: grad g carries a 1/sum(shape) factor,
        so scaling by the voxel count keeps one ``nu`` meaningful across
        latent resolutions.
        """
        return self.nu * float(self.shape.sum())

    def active(self, t: int) -> bool:
        if self.t_range is None:
            return True
        lo, hi = self.t_range
        return lo <= t <= hi


def build_template(healthy_latents: Sequence[np.ndarray]) -> np.ndarray:
    """Voxelwise mean of the healthy latents."""
    if len(healthy_latents) == 0:
        raise DomainError("cannot build a template from no volumes")
    stack = [np.asarray(v, dtype=np.float64) for v in healthy_latents]
    if len({a.shape for a in stack}) != 1:
        raise DimensionError("template inputs differ in shape")
    acc = np.zeros_like(stack[0])
    for a in stack:
        acc += a
    return acc / len(stack)


def appearance(psi, shape):
    """Shape-masked mean of ``psi``; one value per channel for 4D input."""
    psi = np.asarray(psi, dtype=np.float64)
    shape = np.asarray(shape, dtype=np.float64)
    if psi.shape[-3:] != shape.shape or psi.ndim not in (3, 4):
        raise DimensionError(f"psi {psi.shape} and shape {shape.shape} differ")
    total = shape.sum()
    if total == 0.0:
        raise DomainError("shape mask is empty")
    if psi.ndim == 3:
        return float(np.sum(psi * shape) / total)
    return np.array([np.sum(c * shape) / total for c in psi])


def _x0_hat(x_t, t, den, cond, s, v=None):
    if v is None:
        v = den.predict_v(x_t, t, cond)
    return pz.v_to_x0(x_t, v, s, t)


def energy_g(x_t, t: int, spec: GuidanceSpec, den: Denoiser, cond: Condition, s: NoiseSchedule, v=None) -> float:
    x0 = _x0_hat(x_t, t, den, cond, s, v)
    diff = np.atleast_1d(appearance(x0, spec.shape)) - spec.template_appearance
    return float(np.sum(np.abs(diff)))


def grad_g(x_t, t: int, spec: GuidanceSpec, den: Denoiser, cond: Condition, s: NoiseSchedule, v=None) -> np.ndarray:
    """Gradient of ``energy_g`` with respect to x_t.

    Exactly at the L1 kink (appearances equal) the subgradient 0 is returned.
    In ``stop_gradient`` mode, or when the denoiser reports it, the clean
    estimate's Jacobian is replaced by ``sqrt(alpha_bar_t) I``.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = _x0_hat(x_t, t, den, cond, s, v)
    diff = np.atleast_1d(appearance(x0, spec.shape)) - spec.template_appearance
    sign = np.sign(diff)
    if not sign.any():
        log.debug("guidance energy at L1 kink (t=%d); zero gradient", t)
        return np.zeros_like(x_t)
    weight = spec.shape / spec.shape.sum()
    u = sign[0] * weight if x_t.ndim == 3 else sign[:, None, None, None] * weight[None]
    if spec.grad_mode == "stop_gradient" or den.x0_jacobian_mode() == "stop_gradient":
        return math.sqrt(float(s.alpha_bar[t])) * u
    return den.x0_vjp(x_t, t, cond, u)
