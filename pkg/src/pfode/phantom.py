"""Synthetic tau-PET-like phantoms.

Each subject is an ellipsoidal brain with a cortical shell at higher uptake
than the interior, a subject-specific global scale and a smooth low-frequency
field. Anomalous subjects add plateau blobs with a short raised-cosine
skirt, restricted to the shell; the ground-truth mask is the union of the
blobs' half-maximum balls inside the shell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .codec import LatentCodecSpec, downsample_mask, edge_map, encode
from .denoise import Condition
from .errors import ConfigError
from .volcore import Volume


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    k: int = 4
    radii: tuple[float, float, float] = (27.0, 23.0, 21.0)
    shell_thickness: float = 6.0
    cortex_suvr: float = 1.2
    interior_suvr: float = 0.9
    variability: float = 0.002
    anomaly_count: tuple[int, int] = (1, 6)
    blob_radius: tuple[float, float] = (5.0, 11.0)
    skirt: float = 2.0
    magnitude: tuple[float, float] = (0.3, 1.5)
    cognition_noise: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if any(n % self.k for n in self.dims):
            raise ConfigError(f"phantom dims {self.dims} not divisible by k={self.k}")
        if not 0 < self.magnitude[0] <= self.magnitude[1]:
            raise ConfigError("anomaly magnitudes must satisfy 0 < min <= max")
        if not 1 <= self.anomaly_count[0] <= self.anomaly_count[1]:
            raise ConfigError("anomaly count range must satisfy 1 <= min <= max")
        if not 0 < self.blob_radius[0] <= self.blob_radius[1]:
            raise ConfigError("blob radius range must be positive")
        if not 0 < self.skirt < self.blob_radius[0]:
            raise ConfigError("blob skirt must be positive and below the smallest radius")
        if self.shell_thickness <= 0 or min(self.radii) <= self.shell_thickness:
            raise ConfigError("shell thickness must be positive and below every radius")

    @property
    def codec(self) -> LatentCodecSpec:
        return LatentCodecSpec(self.k)


@dataclass(frozen=True)
class Geometry:
    brain: np.ndarray
    shell: np.ndarray
    lobes: tuple[np.ndarray, ...]
    coords: tuple[np.ndarray, np.ndarray, np.ndarray]


def geometry(spec: PhantomSpec) -> Geometry:
    centre = [(n - 1) / 2.0 for n in spec.dims]
    x, y, z = np.meshgrid(*[np.arange(n) - c for n, c in zip(spec.dims, centre)], indexing="ij")
    rx, ry, rz = spec.radii
    th = spec.shell_thickness
    outer = (x / rx) ** 2 + (y / ry) ** 2 + (z / rz) ** 2 <= 1.0
    inner = (x / (rx - th)) ** 2 + (y / (ry - th)) ** 2 + (z / (rz - th)) ** 2 <= 1.0
    shell = outer & ~inner
    if not shell.any():
        raise ConfigError("phantom geometry yields an empty shell")
    lobes = tuple((shell & (np.sign(x) == sx) & (np.sign(y) == sy)).astype(np.float64)
                  for sx in (-1, 1) for sy in (-1, 1))
    return Geometry(outer.astype(np.float64), shell.astype(np.float64), lobes, (x, y, z))


@dataclass(eq=False)
class Subject:
    id: str
    image: Volume
    latent: Volume
    edge: Volume
    truth: Volume  # image-space anomaly mask
    label: str  # "healthy" | "anomalous"
    injected: float = 0.0  # injected uptake per shell voxel
    cognition: float = 0.0  # noisy proxy of ``injected``
    base: Optional[Volume] = field(default=None, repr=False)

    @property
    def condition(self) -> Condition:
        return Condition(np.asarray(self.edge.array, dtype=np.float64))

    @property
    def is_anomalous(self) -> bool:
        return self.label == "anomalous"


def _healthy_image(spec: PhantomSpec, geo: Geometry, rng: np.random.Generator) -> np.ndarray:
    x, y, z = geo.coords
    scale = 1.0 + spec.variability * rng.standard_normal()
    img = np.where(geo.shell > 0, spec.cortex_suvr, spec.interior_suvr) * geo.brain
    field_ = np.zeros(spec.dims)
    for _ in range(3):
        kvec = rng.normal(size=3) * (math.pi / max(spec.dims))
        phase = rng.uniform(0.0, 2.0 * math.pi)
        field_ += np.cos(kvec[0] * x + kvec[1] * y + kvec[2] * z + phase)
    field_ *= spec.variability / math.sqrt(3.0)
    return (img * scale + field_ * geo.brain) * geo.brain


def _inject(spec: PhantomSpec, geo: Geometry, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sum of plateau blobs with a raised-cosine skirt, and their half-maximum mask."""
    x, y, z = geo.coords
    shell_idx = np.argwhere(geo.shell > 0)
    offset = (np.array(spec.dims) - 1) / 2.0
    out = np.zeros(spec.dims)
    core = np.zeros(spec.dims, dtype=bool)
    w = spec.skirt
    n = int(rng.integers(spec.anomaly_count[0], spec.anomaly_count[1] + 1))
    for _ in range(n):
        cx, cy, cz = shell_idx[rng.integers(len(shell_idx))] - offset
        radius = rng.uniform(*spec.blob_radius)
        mag = rng.uniform(*spec.magnitude)
        d = np.sqrt((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2)
        u = np.clip((d - (radius - w)) / w, 0.0, 1.0)
        out += mag * 0.5 * (1.0 + np.cos(math.pi * u))
        core |= d <= radius - 0.5 * w
    return out * geo.shell, (core & (geo.shell > 0)).astype(np.float64)


def _subject(spec: PhantomSpec, geo: Geometry, sid: str, image: np.ndarray, truth: np.ndarray,
             label: str, injected: float, cognition: float, base=None) -> Subject:
    img = Volume(image)
    latent = encode(img.array, spec.codec)
    lat = Volume(latent)
    return Subject(sid, img, lat, Volume(edge_map(lat.array)), Volume(truth), label, injected, cognition, base)


def gen_phantoms(spec: PhantomSpec, n_healthy: int, n_anomalous: int, keep_base: bool = False) -> list[Subject]:
    """Seeded cohort: healthy subjects first, then anomalous ones."""
    if n_healthy < 0 or n_anomalous < 0 or n_healthy + n_anomalous < 1:
        raise ConfigError("need at least one subject")
    geo = geometry(spec)
    shell_vox = float(geo.shell.sum())
    seeds = np.random.SeedSequence(spec.seed).spawn(n_healthy + n_anomalous)
    subjects = []
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        base = _healthy_image(spec, geo, rng)
        cog_noise = spec.cognition_noise * rng.standard_normal()
        if i < n_healthy:
            subjects.append(_subject(spec, geo, f"H{i:03d}", base, np.zeros(spec.dims), "healthy", 0.0, cog_noise))
            continue
        inj, truth = _inject(spec, geo, rng)
        injected = float(inj.sum() / shell_vox)
        subjects.append(_subject(
            spec, geo, f"A{i - n_healthy:03d}", base + inj, truth, "anomalous",
            injected, injected + cog_noise, Volume(base) if keep_base else None,
        ))
    return subjects


def latent_shape_mask(spec: PhantomSpec) -> np.ndarray:
    """Brain mask pooled to latent space and thresholded at 0.5."""
    return downsample_mask(geometry(spec).brain, spec.codec)
