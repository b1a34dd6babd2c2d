"""Fixed linear latent codec and latent edge maps.

``encode`` average-pools k^3 blocks. ``decode`` upsamples trilinearly with
cell-centred sample positions and edge clamping, so a latent voxel value sits
at the centre of its k^3 image block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class LatentCodecSpec:
    k: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"downsample factor must be >= 1, got {self.k}")


def encode(image, spec: LatentCodecSpec = LatentCodecSpec()) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    k = spec.k
    if a.ndim != 3:
        raise DimensionError("encode expects a 3D volume")
    if any(n % k for n in a.shape):
        raise ConfigError(f"image dims {a.shape} not divisible by k={k}")
    nx, ny, nz = (n // k for n in a.shape)
    return a.reshape(nx, k, ny, k, nz, k).mean(axis=(1, 3, 5))


def _upsample_axis(a: np.ndarray, k: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    # image sample i sits at latent coordinate (i + 0.5) / k - 0.5
    pos = (np.arange(n * k) + 0.5) / k - 0.5
    pos = np.clip(pos, 0.0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    shape = [1] * a.ndim
    shape[axis] = n * k
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - frac) + np.take(a, hi, axis=axis) * frac


def decode(latent, spec: LatentCodecSpec = LatentCodecSpec()) -> np.ndarray:
    a = np.asarray(latent, dtype=np.float64)
    if a.ndim != 3:
        raise DimensionError("decode expects a 3D volume")
    if spec.k == 1:
        return a.copy()
    for axis in range(3):
        a = _upsample_axis(a, spec.k, axis)
    return a


def edge_map(latent) -> np.ndarray:
    """Central-difference gradient magnitude, replicate-padded, scaled to max 1."""
    a = np.asarray(latent, dtype=np.float64)
    if a.ndim != 3 or min(a.shape) < 3:
        raise DimensionError("edge map needs a 3D volume with every axis >= 3")
    p = np.pad(a, 1, mode="edge")
    gx = (p[2:, 1:-1, 1:-1] - p[:-2, 1:-1, 1:-1]) / 2.0
    gy = (p[1:-1, 2:, 1:-1] - p[1:-1, :-2, 1:-1]) / 2.0
    gz = (p[1:-1, 1:-1, 2:] - p[1:-1, 1:-1, :-2]) / 2.0
    mag = np.sqrt(gx * gx + gy * gy + gz * gz)
    top = mag.max()
    if top == 0.0:
        return np.zeros_like(mag)
    return mag / top


def downsample_mask(mask, spec: LatentCodecSpec = LatentCodecSpec(), threshold: float = 0.5) -> np.ndarray:
    """Pool an image-space binary mask to latent space and re-binarize."""
    return (encode(mask, spec) >= threshold).astype(np.float64)
