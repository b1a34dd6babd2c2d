"""v-prediction denoisers.

Two implementations share the :class:`Denoiser` surface:

* :class:`MixtureDenoiser` is exact for data drawn from an isotropic Gaussian
  mixture, so every sampler can be checked against closed-form scores.
* :class:`LocalLinearDenoiser` is a single 3x3x3 convolution over the noisy
  latent and its edge map, fit per time bucket by ridge regression.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import parametrize as pz
from .errors import ConfigError, DimensionError, DomainError, FormatError, TrainingError
from .schedule import NoiseSchedule
from .volcore import atomic_write_bytes

OFFSETS = tuple(itertools.product((-1, 0, 1), repeat=3))
N_SCHEDULE_FEATURES = 2


@dataclass(frozen=True)
class Condition:
    """Edge-map condition; ``edge=None`` is the null condition (all zeros)."""

    edge: Optional[np.ndarray] = None

    @property
    def is_null(self) -> bool:
        return self.edge is None

    def edge_for(self, shape) -> np.ndarray:
        if self.edge is None:
            return np.zeros(shape)
        edge = np.asarray(self.edge, dtype=np.float64)
        if edge.shape != tuple(shape):
            raise DimensionError(f"edge map {edge.shape} does not match latent {tuple(shape)}")
        return edge


NULL_CONDITION = Condition()


class Denoiser:
    """Interface: ``predict_v`` plus the vector-Jacobian product of x0-hat."""

    schedule: NoiseSchedule
    jacobian_mode = "full"

    def predict_v(self, x_t, t: int, cond: Condition = NULL_CONDITION) -> np.ndarray:
        raise NotImplementedError

    def x0_vjp(self, x_t, t: int, cond: Condition, u) -> np.ndarray:
        """(d x0_hat / d x_t)^T u."""
        raise NotImplementedError

    def x0_jacobian_mode(self) -> str:
        return self.jacobian_mode

    def predict_x0(self, x_t, t: int, cond: Condition = NULL_CONDITION) -> np.ndarray:
        return pz.v_to_x0(x_t, self.predict_v(x_t, t, cond), self.schedule, t)

    def _check(self, x_t, t: int) -> np.ndarray:
        x = np.asarray(x_t, dtype=np.float64)
        self.schedule.check(t)
        if self.shape is not None and x.shape != self.shape:
            raise DimensionError(f"input {x.shape} does not match model dims {self.shape}")
        return x

    shape: Optional[tuple] = None


# --- exact mixture oracle ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class MixtureModel:
    weights: np.ndarray
    means: np.ndarray  # (K, *dims)
    tau2: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        if w.ndim != 1 or mu.shape[0] != w.size:
            raise DimensionError("need one weight per mixture mean")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must be positive and sum to 1")
        if not self.tau2 > 0:
            raise DomainError("tau2 must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)

    @classmethod
    def from_samples(cls, samples: Sequence[np.ndarray], tau2: float) -> "MixtureModel":
        mu = np.stack([np.asarray(m, dtype=np.float64) for m in samples])
        return cls(np.full(len(mu), 1.0 / len(mu)), mu, tau2)

    @property
    def dims(self) -> tuple:
        return self.means.shape[1:]

    def marginal_var(self, alpha_bar: float) -> float:
        return alpha_bar * self.tau2 + 1.0 - alpha_bar

    def responsibilities(self, x: np.ndarray, alpha_bar: float) -> np.ndarray:
        var = self.marginal_var(alpha_bar)
        diff = x[None] - math.sqrt(alpha_bar) * self.means
        sq = np.sum(diff.reshape(len(self.weights), -1) ** 2, axis=1)
        logits = np.log(self.weights) - 0.5 * sq / var
        logits -= logits.max()
        r = np.exp(logits)
        return r / r.sum()

    def log_density(self, x: np.ndarray, alpha_bar: float) -> float:
        var = self.marginal_var(alpha_bar)
        diff = x[None] - math.sqrt(alpha_bar) * self.means
        sq = np.sum(diff.reshape(len(self.weights), -1) ** 2, axis=1)
        logits = np.log(self.weights) - 0.5 * sq / var
        top = logits.max()
        d = x.size
        return float(top + math.log(np.sum(np.exp(logits - top))) - 0.5 * d * math.log(2 * math.pi * var))

    def score(self, x: np.ndarray, alpha_bar: float) -> np.ndarray:
        r = self.responsibilities(x, alpha_bar)
        mbar = np.tensordot(r, self.means, axes=1)
        return (math.sqrt(alpha_bar) * mbar - x) / self.marginal_var(alpha_bar)


class MixtureDenoiser(Denoiser):
    """Exact v-prediction for data ~ sum_k w_k N(mu_k, tau2 I). Ignores the condition."""

    def __init__(self, model: MixtureModel, schedule: NoiseSchedule, jacobian_mode: str = "full"):
        if jacobian_mode not in ("full", "stop_gradient"):
            raise ConfigError(f"unknown jacobian mode {jacobian_mode!r}")
        self.model = model
        self.schedule = schedule
        self.shape = tuple(model.dims)
        self.jacobian_mode = jacobian_mode

    def score(self, x_t, t: int) -> np.ndarray:
        x = self._check(x_t, t)
        return self.model.score(x, float(self.schedule.alpha_bar[t]))

    def predict_v(self, x_t, t: int, cond: Condition = NULL_CONDITION) -> np.ndarray:
        x = self._check(x_t, t)
        eps = pz.score_to_epsilon(self.model.score(x, float(self.schedule.alpha_bar[t])), self.schedule, t)
        return pz.epsilon_to_v(x, eps, self.schedule, t)

    def x0_vjp(self, x_t, t: int, cond: Condition, u) -> np.ndarray:
        x = self._check(x_t, t)
        u = np.asarray(u, dtype=np.float64)
        ab = float(self.schedule.alpha_bar[t])
        m = self.model
        var = m.marginal_var(ab)
        r = m.responsibilities(x, ab)
        mbar = np.tensordot(r, m.means, axes=1)
        shrink = math.sqrt(ab) * m.tau2 / var
        # per-component posterior means m_k = mu_k + shrink (x - sqrt(ab) mu_k)
        post = (1.0 - shrink * math.sqrt(ab)) * m.means + shrink * x[None]
        proj = np.tensordot(post, u, axes=u.ndim)
        spread = m.means - mbar[None]
        return shrink * u + (math.sqrt(ab) / var) * np.tensordot(r * proj, spread, axes=1)


# --- local-linear ridge denoiser --------------------------------------------

def neighborhood(a: np.ndarray) -> np.ndarray:
    """(27, *a.shape) stack of zero-padded neighbours, ordered as ``OFFSETS``."""
    nx, ny, nz = a.shape
    p = np.pad(a, 1)
    return np.stack([p[1 + dx:1 + dx + nx, 1 + dy:1 + dy + ny, 1 + dz:1 + dz + nz] for dx, dy, dz in OFFSETS])


def neighborhood_adjoint(w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Adjoint of ``x -> sum_o w[o] * neighborhood(x)[o]``."""
    nx, ny, nz = u.shape
    p = np.pad(u, 1)
    out = np.zeros_like(u)
    for wo, (dx, dy, dz) in zip(w, OFFSETS):
        out += wo * p[1 - dx:1 - dx + nx, 1 - dy:1 - dy + ny, 1 - dz:1 - dz + nz]
    return out


def design_matrix(x_t: np.ndarray, edge: np.ndarray, alpha_bar: float) -> np.ndarray:
    """Per-voxel features: 27 x_t taps, 27 edge taps, 1, sqrt(ab), sqrt(1-ab)."""
    n = x_t.size
    cols = [neighborhood(x_t).reshape(27, n), neighborhood(edge).reshape(27, n)]
    tail = np.empty((3, n))
    tail[0] = 1.0
    tail[1] = math.sqrt(alpha_bar)
    tail[2] = math.sqrt(1.0 - alpha_bar)
    return np.concatenate(cols + [tail]).T


def ridge_solve(xtx: np.ndarray, xty: np.ndarray, n: int, lam: float, bias_index: int) -> np.ndarray:
    """Minimize mean squared error + lam * |w|^2 with the bias left unpenalized."""
    a = xtx / n
    penalty = np.full(len(a), lam)
    penalty[bias_index] = 0.0
    a = a + np.diag(penalty)
    try:
        return np.linalg.solve(a, xty / n)
    except np.linalg.LinAlgError as exc:
        raise TrainingError(f"singular ridge normal equations (lambda={lam})") from exc


class LocalLinearDenoiser(Denoiser):
    n_inputs = 2  # x_t and edge

    def __init__(self, weights: np.ndarray, schedule: NoiseSchedule, lam: float, jacobian_mode: str = "full"):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[1] != self.n_weights():
            raise DimensionError(f"expected (buckets, {self.n_weights()}) weights, got {weights.shape}")
        if jacobian_mode not in ("full", "stop_gradient"):
            raise ConfigError(f"unknown jacobian mode {jacobian_mode!r}")
        self.weights = weights
        self.schedule = schedule
        self.lam = float(lam)
        self.jacobian_mode = jacobian_mode

    @classmethod
    def n_weights(cls) -> int:
        return 27 * cls.n_inputs + 1 + N_SCHEDULE_FEATURES

    @property
    def buckets(self) -> int:
        return len(self.weights)

    def bucket_weights(self, t: int) -> np.ndarray:
        return self.weights[self.schedule.bucket(t, self.buckets)]

    def predict_v(self, x_t, t: int, cond: Condition = NULL_CONDITION) -> np.ndarray:
        x = self._check(x_t, t)
        if x.ndim != 3:
            raise DimensionError("local-linear denoiser needs a 3D latent")
        w = self.bucket_weights(t)
        ab = float(self.schedule.alpha_bar[t])
        edge = cond.edge_for(x.shape)
        v = np.tensordot(w[:27], neighborhood(x), axes=1)
        v += np.tensordot(w[27:54], neighborhood(edge), axes=1)
        v += w[54] + w[55] * math.sqrt(ab) + w[56] * math.sqrt(1.0 - ab)
        return v

    def x0_vjp(self, x_t, t: int, cond: Condition, u) -> np.ndarray:
        self._check(x_t, t)
        u = np.asarray(u, dtype=np.float64)
        ab = float(self.schedule.alpha_bar[t])
        w = self.bucket_weights(t)
        return math.sqrt(ab) * u - math.sqrt(1.0 - ab) * neighborhood_adjoint(w[:27], u)

    # TAUW serialization: magic, u32 version, u32 buckets, u32 T, u32 n_weights,
    # f64 lambda, then buckets x n_weights f64, all little-endian.
    _HEAD = struct.Struct("<4sIIIId")

    def to_bytes(self) -> bytes:
        head = self._HEAD.pack(b"TAUW", 1, self.buckets, self.schedule.T, self.n_weights(), self.lam)
        return head + np.asarray(self.weights, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, schedule: NoiseSchedule, source: str = "<bytes>") -> "LocalLinearDenoiser":
        if len(buf) < cls._HEAD.size:
            raise FormatError(f"{source}: truncated TAUW header")
        magic, version, buckets, T, nw, lam = cls._HEAD.unpack_from(buf)
        if magic != b"TAUW":
            raise FormatError(f"{source}: bad magic {magic!r}, expected b'TAUW'")
        if version != 1:
            raise FormatError(f"{source}: unsupported TAUW version {version}")
        if nw != cls.n_weights():
            raise FormatError(f"{source}: {nw} weights per bucket, expected {cls.n_weights()}")
        if T != schedule.T:
            raise FormatError(f"{source}: fitted for T={T}, schedule has T={schedule.T}")
        if len(buf) != cls._HEAD.size + 8 * buckets * nw:
            raise FormatError(f"{source}: truncated TAUW payload")
        w = np.frombuffer(buf, dtype="<f8", offset=cls._HEAD.size).reshape(buckets, nw)
        return cls(w.astype(np.float64), schedule, lam)

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path, schedule: NoiseSchedule) -> "LocalLinearDenoiser":
        path = Path(path)
        try:
            buf = path.read_bytes()
        except OSError as exc:
            raise FormatError(f"{path}: {exc.strerror}") from exc
        return cls.from_bytes(buf, schedule, str(path))


def bucket_range(s: NoiseSchedule, b: int, buckets: int) -> tuple[int, int]:
    """Inclusive timestep range of bucket ``b``."""
    ts = np.flatnonzero((np.arange(s.T) * buckets) // s.T == b) + 1
    return int(ts[0]), int(ts[-1])


def fit_local_linear(
    healthy_latents: Sequence[np.ndarray],
    conds: Sequence[Condition],
    s: NoiseSchedule,
    buckets: int = 10,
    lam: float = 1e-3,
    seed: int = 0,
    draws: int = 4,
) -> LocalLinearDenoiser:
    """Fit one ridge regression per time bucket on freshly noised training latents.

    For every bucket, each training latent is noised ``draws`` times at
    timesteps drawn uniformly from the bucket; the regression target is the
    true velocity. Randomness comes from one generator seeded with ``seed``
    and consumed in a fixed order.
    """
    if len(healthy_latents) < 2:
        raise TrainingError("need at least two training volumes")
    if len(conds) != len(healthy_latents):
        raise DimensionError("one condition per training latent")
    if buckets < 1 or buckets > s.T:
        raise ConfigError(f"buckets must be in 1..{s.T}")
    if not lam > 0:
        raise ConfigError("ridge lambda must be positive")
    lat = [np.asarray(x, dtype=np.float64) for x in healthy_latents]
    shape = lat[0].shape
    if any(x.shape != shape for x in lat) or len(shape) != 3:
        raise DimensionError("training latents must share one 3D shape")
    edges = [c.edge_for(shape) for c in conds]

    rng = np.random.default_rng(seed)
    nw = LocalLinearDenoiser.n_weights()
    weights = np.empty((buckets, nw))
    for b in range(buckets):
        lo, hi = bucket_range(s, b, buckets)
        xtx = np.zeros((nw, nw))
        xty = np.zeros(nw)
        n = 0
        for x0, edge in zip(lat, edges):
            for _ in range(draws):
                t = int(rng.integers(lo, hi + 1))
                eps = rng.standard_normal(shape)
                x_t = pz.forward_mix(x0, eps, s, t)
                target = pz.velocity(x0, eps, s, t).ravel()
                X = design_matrix(x_t, edge, float(s.alpha_bar[t]))
                xtx += X.T @ X
                xty += X.T @ target
                n += X.shape[0]
        weights[b] = ridge_solve(xtx, xty, n, lam, bias_index=54)
    return LocalLinearDenoiser(weights, s, lam)
