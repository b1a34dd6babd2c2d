"""Dense 3D volumes: arithmetic, masked reductions, statistics and file I/O.

A :class:`Volume` holds float32 data laid out as ``(channels, nx, ny, nz)``.
On disk the TAUV format stores each channel block x-fastest, which is
Fortran order of the ``(nx, ny, nz)`` block.
"""
from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import special

from .errors import DegenerateInputError, DimensionError, DomainError, FormatError

TAUV_MAGIC = b"TAUV"
TAUV_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise DimensionError(f"volume data must be 3D or (C, nx, ny, nz), got shape {arr.shape}")
        arr = np.array(arr, dtype=np.float32, copy=True)
        if not np.all(np.isfinite(arr)):
            raise DomainError("volume contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def array(self) -> np.ndarray:
        """Single-channel data as a 3D array (read-only view)."""
        if self.channels != 1:
            raise DimensionError("array view requires a single-channel volume")
        return self.data[0]

    def channel(self, c: int) -> "Volume":
        return Volume(self.data[c])

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()

    def __repr__(self):
        return f"Volume(dims={self.dims}, channels={self.channels})"

    @classmethod
    def zeros(cls, dims, channels: int = 1) -> "Volume":
        return cls(np.zeros((channels, *dims), dtype=np.float32))

    @classmethod
    def full(cls, dims, value: float, channels: int = 1) -> "Volume":
        return cls(np.full((channels, *dims), value, dtype=np.float32))

    @classmethod
    def concat(cls, volumes: Sequence["Volume"]) -> "Volume":
        """Channel-wise concatenation."""
        dims = {v.dims for v in volumes}
        if len(dims) != 1:
            raise DimensionError(f"cannot concatenate volumes with dims {sorted(dims)}")
        return cls(np.concatenate([v.data for v in volumes], axis=0))


ArrayLike = Union[Volume, np.ndarray]


def as_array(v: ArrayLike) -> np.ndarray:
    """Raw data of a volume; single-channel volumes come back 3D."""
    if isinstance(v, Volume):
        return v.data[0] if v.channels == 1 else v.data
    return np.asarray(v)


def is_binary_mask(m: ArrayLike) -> bool:
    a = as_array(m)
    return bool(np.all((a == 0.0) | (a == 1.0)))


def elementwise(op: str, a: Volume, b: Union[Volume, float]) -> Volume:
    """``add``, ``sub``, ``mul`` against a volume or scalar; ``scale`` by a scalar."""
    x = a.data
    if isinstance(b, Volume):
        if b.data.shape != x.shape:
            raise DimensionError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
        y = b.data
    else:
        y = np.float32(b)
    if op == "add":
        out = np.add(x, y, dtype=np.float32)
    elif op == "sub":
        out = np.subtract(x, y, dtype=np.float32)
    elif op in ("mul", "scale"):
        if op == "scale" and isinstance(b, Volume):
            raise DomainError("scale takes a scalar factor")
        out = np.multiply(x, y, dtype=np.float32)
    else:
        raise DomainError(f"unknown elementwise op {op!r}")
    return Volume(out)


def _masked_values(v: ArrayLike, m: ArrayLike) -> np.ndarray:
    va, ma = as_array(v), as_array(m)
    if va.shape != ma.shape:
        raise DimensionError(f"volume {va.shape} and mask {ma.shape} differ")
    if not np.any(ma):
        raise DomainError("mask has no nonzero voxel")
    return va, ma


def masked_mean(v: ArrayLike, m: ArrayLike) -> float:
    """Sum(v * m) / Sum(m) accumulated in float64."""
    va, ma = _masked_values(v, m)
    w = ma.astype(np.float64)
    return float(np.sum(va.astype(np.float64) * w) / np.sum(w))


def percentile(v: ArrayLike, m: ArrayLike, q: float) -> float:
    """Linear-interpolation percentile of the voxels where ``m`` is nonzero."""
    if not 0.0 <= q <= 100.0:
        raise DomainError(f"percentile q={q} outside [0, 100]")
    va, ma = _masked_values(v, m)
    vals = va[ma != 0]
    return float(np.percentile(vals.astype(np.float64), q, method="linear"))


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise DimensionError("pearson needs two 1-D sequences of equal length")
    if xs.size < 3:
        raise DomainError("pearson needs at least 3 pairs")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("zero variance input to pearson")
    # separate roots avoid underflow of sxx * syy for tiny spreads
    r = float(np.dot(dx, dy)) / (math.sqrt(sxx) * math.sqrt(syy))
    return min(1.0, max(-1.0, r))


def welch_neglog_p(group_a: Sequence[float], group_b: Sequence[float]) -> float:
    """-log10 of the two-sided Welch t-test p-value."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DomainError("each group needs at least two values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    if va == 0.0 or vb == 0.0:
        raise DegenerateInputError("zero within-group variance")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    a, x = df / 2.0, df / (df + t * t)
    p = float(special.betainc(a, 0.5, x))
    if p > 0.0:
        return max(0.0, -math.log10(min(p, 1.0)))
    # p underflowed: leading term of the series, I_x(a, b) ~ x^a (1-x)^b / (a B(a, b))
    log_p = a * math.log(x) + 0.5 * math.log1p(-x) - math.log(a) - float(special.betaln(a, 0.5))
    return -log_p / math.log(10.0)


# --- TAUV file format -------------------------------------------------------

def atomic_write_bytes(path: Union[str, Path], payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def volume_to_bytes(v: Volume) -> bytes:
    nx, ny, nz = v.dims
    head = _HEADER.pack(TAUV_MAGIC, TAUV_VERSION, v.channels, nx, ny, nz)
    body = b"".join(np.asarray(v.data[c], dtype="<f4").ravel(order="F").tobytes() for c in range(v.channels))
    return head + body


def volume_from_bytes(buf: bytes, source: str = "<bytes>") -> Volume:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{source}: truncated TAUV header")
    magic, version, c, nx, ny, nz = _HEADER.unpack_from(buf)
    if magic != TAUV_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {TAUV_MAGIC!r}")
    if version != TAUV_VERSION:
        raise FormatError(f"{source}: unsupported TAUV version {version}")
    n = c * nx * ny * nz
    if n == 0:
        raise FormatError(f"{source}: zero-sized volume")
    if len(buf) != _HEADER.size + 4 * n:
        raise FormatError(f"{source}: payload is {len(buf) - _HEADER.size} bytes, expected {4 * n}")
    flat = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size, count=n)
    blocks = flat.reshape(c, nx * ny * nz)
    data = np.stack([blk.reshape((nx, ny, nz), order="F") for blk in blocks])
    return Volume(data)


def write_volume(path: Union[str, Path], v: Volume) -> None:
    atomic_write_bytes(path, volume_to_bytes(v))


def read_volume(path: Union[str, Path]) -> Volume:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    return volume_from_bytes(buf, str(path))


def write_pgm_slice(path: Union[str, Path], v: ArrayLike, z: int | None = None, channel: int = 0) -> tuple[float, float]:
    """Write axial slice ``z`` as an 8-bit binary PGM, min-max scaled.

    The scaling bounds go to ``<path>.txt`` as ``min max``. Rows are y, columns x.
    """
    a = as_array(v)
    if a.ndim == 4:
        a = a[channel]
    if z is None:
        z = a.shape[2] // 2
    sl = np.asarray(a[:, :, z], dtype=np.float64).T
    lo, hi = float(sl.min()), float(sl.max())
    if hi > lo:
        img = np.rint((sl - lo) / (hi - lo) * 255.0)
    else:
        img = np.zeros_like(sl)
    img = img.astype(np.uint8)
    height, width = img.shape
    path = Path(path)
    atomic_write_bytes(path, f"P5\n{width} {height}\n255\n".encode("ascii") + img.tobytes())
    atomic_write_bytes(path.with_name(path.name + ".txt"), f"{lo!r} {hi!r}\n".encode("ascii"))
    return lo, hi
