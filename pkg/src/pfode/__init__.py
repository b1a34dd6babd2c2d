"""Deterministic probability-flow diffusion sampling with template-intensity
guidance, applied to voxel anomaly detection on synthetic PET phantoms."""

__version__ = "0.1.0"
