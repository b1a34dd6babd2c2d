"""Pseudo-healthy reconstruction -> anomaly map -> classifier -> anomaly score,
and cohort-level evaluation.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .codec import LatentCodecSpec, decode
from .denoise import Condition, Denoiser, LocalLinearDenoiser, MixtureDenoiser, MixtureModel, fit_local_linear
from .errors import ConfigError, DegenerateInputError, DimensionError, DomainError, TrainingError
from .guide import GuidanceSpec
from .phantom import Subject
from .sample import SamplerConfig, reconstruct
from .schedule import NoiseSchedule
from .volcore import Volume, masked_mean, pearson, percentile, welch_neglog_p

log = logging.getLogger(__name__)

FEATURES = ("mean", "max", "p95", "positive_fraction")


def anomaly_map(input_latent, recon_latent, codec: LatentCodecSpec = LatentCodecSpec()) -> np.ndarray:
    """Signed image-space map, positive where the input exceeds its reconstruction."""
    a = np.asarray(input_latent, dtype=np.float64)
    b = np.asarray(recon_latent, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"input {a.shape} and reconstruction {b.shape} differ")
    return decode(a - b, codec)


def anomaly_score(m_suvr: float, p_cls: float) -> float:
    """Geometric mean of brain-mean uptake and classifier probability."""
    if not 0.0 <= p_cls <= 1.0:
        raise DomainError(f"p_cls={p_cls} outside [0, 1]")
    return math.sqrt(max(m_suvr, 0.0) * p_cls)


@dataclass(frozen=True, eq=False)
class AnomalyReport:
    anomaly_map: Volume
    m_suvr: float
    p_cls: Optional[float] = None
    features: tuple = ()

    @property
    def score(self) -> float:
        if self.p_cls is None:
            raise TrainingError("report has no classifier probability yet")
        return anomaly_score(self.m_suvr, self.p_cls)

    def with_probability(self, p: float) -> "AnomalyReport":
        return replace(self, p_cls=float(p))


def map_features(amap, brain) -> tuple[float, float, float, float]:
    """Mean, max, 95th percentile and fraction of positive voxels inside ``brain``."""
    a = np.asarray(amap, dtype=np.float64)
    m = np.asarray(brain)
    vals = a[m != 0]
    return (
        masked_mean(a, m),
        float(vals.max()),
        percentile(a, m, 95.0),
        float(np.count_nonzero(vals > 0.0)) / vals.size,
    )


def make_report(input_image, input_latent, recon_latent, brain, codec: LatentCodecSpec,
                m_source: str = "input") -> AnomalyReport:
    """Anomaly map and m_SUVR for one subject (no classifier probability yet).

    ``m_source="input"`` takes the brain mean of the input image;
    ``"anomaly_map"`` takes the brain mean of the anomaly map instead.
    """
    amap = anomaly_map(input_latent, recon_latent, codec)
    if m_source == "input":
        m = masked_mean(input_image, brain)
    elif m_source == "anomaly_map":
        m = masked_mean(amap, brain)
    else:
        raise ConfigError(f"unknown m_suvr source {m_source!r}")
    return AnomalyReport(Volume(amap), m, None, map_features(amap, brain))


# --- classifier -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClassifierModel:
    """Logistic regression on standardized anomaly-map features."""

    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray

    def decision(self, features) -> np.ndarray:
        X = (np.atleast_2d(np.asarray(features, dtype=np.float64)) - self.mean) / self.scale
        return X @ self.weights + self.bias

    def predict_proba(self, features) -> np.ndarray:
        return _sigmoid(self.decision(features))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


def logistic_gd(X: np.ndarray, y: np.ndarray, w0: np.ndarray, b0: float, lr: float, iters: int):
    """Full-batch gradient descent on mean binary cross-entropy."""
    w = w0.copy()
    b = float(b0)
    n = len(y)
    for _ in range(iters):
        r = _sigmoid(X @ w + b) - y
        w -= lr * (X.T @ r) / n
        b -= lr * float(np.sum(r)) / n
    return w, b


def fit_classifier(reports: Sequence[tuple[AnomalyReport, int]], seed: int = 0,
                   lr: float = 0.5, iters: int = 2000) -> ClassifierModel:
    labels = np.array([int(lbl) for _, lbl in reports], dtype=np.float64)
    if len(set(labels.tolist())) < 2:
        raise TrainingError("classifier needs both labels present")
    X = np.array([r.features for r, _ in reports], dtype=np.float64)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0.0] = 1.0
    Xs = (X - mean) / scale
    w0 = 0.01 * np.random.default_rng(seed).standard_normal(X.shape[1])
    w, b = logistic_gd(Xs, labels, w0, 0.0, lr, iters)
    return ClassifierModel(w, b, mean, scale)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() != 0
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("AUC needs both classes")
    ranks = stats.rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# --- evaluation -------------------------------------------------------------

@dataclass
class EvaluationTable:
    regions: list = field(default_factory=list)  # (name, pearson_r, n)
    group_a_n: int = 0
    group_b_n: int = 0
    neglog10_p: float = float("nan")

    def regions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["region", "pearson_r", "n"])
        for name, r, n in self.regions:
            w.writerow([name, f"{r:.6f}", n])
        return buf.getvalue()

    def groups_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group_a_n", "group_b_n", "neglog10_p"])
        w.writerow([self.group_a_n, self.group_b_n, f"{self.neglog10_p:.6f}"])
        return buf.getvalue()


def evaluate_cohort(
    subjects: Sequence[Subject],
    reports: Sequence[AnomalyReport],
    regions: Sequence[tuple[str, np.ndarray]],
    proxy: Optional[Sequence[float]] = None,
    threshold: float = 0.5,
) -> EvaluationTable:
    """Per-region Pearson r of anomaly score vs regional mean intensity, and a Welch
    comparison of ``proxy`` (default: each subject's cognition proxy) between
    predicted-positive and predicted-negative subjects."""
    if len(subjects) != len(reports):
        raise DimensionError("subjects and reports are not aligned")
    scores = [r.score for r in reports]
    table = EvaluationTable()
    for name, mask in regions:
        means = [masked_mean(s.image, mask) for s in subjects]
        try:
            table.regions.append((name, pearson(scores, means), len(subjects)))
        except (DegenerateInputError, DomainError) as exc:
            log.warning("region %s skipped: %s", name, exc)
    values = np.asarray([s.cognition for s in subjects] if proxy is None else proxy, dtype=np.float64)
    pos = np.array([r.p_cls >= threshold for r in reports])
    table.group_a_n = int(pos.sum())
    table.group_b_n = int((~pos).sum())
    try:
        table.neglog10_p = welch_neglog_p(values[pos], values[~pos])
    except (DegenerateInputError, DomainError) as exc:
        log.warning("group comparison skipped: %s", exc)
    return table


# --- orchestration ----------------------------------------------------------

def build_denoiser(kind: str, healthy: Sequence[Subject], schedule: NoiseSchedule, *, tau2: float = 2.5e-4,
                   buckets: int = 10, lam: float = 1e-3, seed: int = 0) -> Denoiser:
    lat = [np.asarray(s.latent.array, dtype=np.float64) for s in healthy]
    if kind == "oracle":
        return MixtureDenoiser(MixtureModel.from_samples(lat, tau2), schedule)
    if kind == "local_linear":
        return fit_local_linear(lat, [s.condition for s in healthy], schedule, buckets, lam, seed)
    raise ConfigError(f"unknown denoiser kind {kind!r}")


def _map_jobs(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def reconstruct_subjects(subjects: Sequence[Subject], cfg: SamplerConfig, den: Denoiser,
                         jobs: int = 1) -> list[np.ndarray]:
    """Reconstruct each subject's latent; every subject uses the same sampler config."""
    def one(s: Subject) -> np.ndarray:
        return reconstruct(s.latent.array, cfg, den, s.condition)

    return _map_jobs(one, subjects, jobs)


def report_subjects(subjects: Sequence[Subject], recons: Sequence[np.ndarray], brain, codec: LatentCodecSpec,
                    m_source: str = "input") -> list[AnomalyReport]:
    return [make_report(s.image.array, s.latent.array, r, brain, codec, m_source) for s, r in zip(subjects, recons)]


def score_reports(reports: Sequence[AnomalyReport], clf: ClassifierModel) -> list[AnomalyReport]:
    if not reports:
        return []
    p = clf.predict_proba([r.features for r in reports])
    return [r.with_probability(pi) for r, pi in zip(reports, p)]


def localization_auc(subjects: Sequence[Subject], reports: Sequence[AnomalyReport], brain) -> float:
    """Voxelwise AUC of anomaly maps against truth masks, pooled over subjects within ``brain``."""
    m = np.asarray(brain) != 0
    scores = np.concatenate([np.asarray(r.anomaly_map.array)[m] for r in reports])
    truth = np.concatenate([np.asarray(s.truth.array)[m] for s in subjects])
    return roc_auc(scores, truth)
