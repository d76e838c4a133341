from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np
from scipy.special import entr
from scipy.stats import norm, rankdata

from ..core.errors import ConfigError, DimensionMismatch, NonPositiveScale, NonPositiveVariance, SingleClass

DEFAULT_LEVELS = tuple(round(0.1 * i, 1) for i in range(1, 10))


def _flat(*arrays) -> List[np.ndarray]:
    out = [np.atleast_1d(np.asarray(a, dtype=np.float64)).ravel() for a in arrays]
    if len({a.shape[0] for a in out}) != 1:
        raise DimensionMismatch(f"inputs have different lengths: {[a.shape[0] for a in out]}")
    return out


def gaussian_nll(y, mu, sigma2) -> float:
    """Mean of 1/2 log(2 pi sigma2) + (y - mu)^2 / (2 sigma2)."""
    y, mu, sigma2 = _flat(y, mu, sigma2)
    if np.any(sigma2 <= 0):
        raise NonPositiveVariance("predictive variance must be > 0")
    return float(np.mean(0.5 * np.log(2.0 * math.pi * sigma2) + (y - mu) ** 2 / (2.0 * sigma2)))


def crps_gaussian(y, mu, sigma) -> float:
    """Closed-form CRPS of N(mu, sigma^2), averaged over the batch."""
    y, mu, sigma = _flat(y, mu, sigma)
    if np.any(sigma <= 0):
        raise NonPositiveScale("predictive scale must be > 0")
    z = (y - mu) / sigma
    crps = sigma * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - 1.0 / math.sqrt(math.pi))
    return float(np.mean(crps))


def cqm(y, mu, sigma, levels: Sequence[float] = DEFAULT_LEVELS) -> float:
    """Mean |coverage - level| of the central intervals mu +- sigma * z_{(1+q)/2}."""
    y, mu, sigma = _flat(y, mu, sigma)
    levels = np.asarray(levels, dtype=np.float64)
    if levels.size == 0 or np.any((levels <= 0) | (levels >= 1)):
        raise ConfigError("levels must lie strictly inside (0, 1)")
    half_width = np.outer(norm.ppf((1.0 + levels) / 2.0), sigma)
    coverage = np.mean(np.abs(y - mu)[None, :] <= half_width, axis=1)
    return float(np.mean(np.abs(coverage - levels)))


@dataclass(frozen=True)
class BinnedCalibration:
    n_bins: int
    counts: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.counts.sum())

    def ece(self) -> float:
        filled = self.counts > 0
        gaps = np.abs(self.accuracy[filled] - self.confidence[filled])
        return float(np.sum(self.counts[filled] * gaps) / max(1, self.n_samples))


def _probs_labels(probs, labels):
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels).astype(np.int64).ravel()
    if probs.shape[0] != labels.shape[0]:
        raise DimensionMismatch(f"{probs.shape[0]} probability rows for {labels.shape[0]} labels")
    return probs, labels


def binned_calibration(probs, labels, n_bins: int = 15) -> BinnedCalibration:
    """Equal-width confidence bins on [0, 1]; the last bin is closed."""
    probs, labels = _probs_labels(probs, labels)
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    bins = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    safe = np.maximum(counts, 1)
    confidence = np.bincount(bins, weights=conf, minlength=n_bins) / safe
    accuracy = np.bincount(bins, weights=correct, minlength=n_bins) / safe
    return BinnedCalibration(n_bins, counts, confidence, accuracy)


def ece(probs, labels, n_bins: int = 15) -> float:
    return binned_calibration(probs, labels, n_bins).ece()


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores count 1/2."""
    scores, labels = _flat(scores, labels)
    positive = labels > 0.5
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def predictive_entropy(p) -> float:
    """Entropy in nats, 0 log 0 = 0."""
    return float(np.sum(entr(np.asarray(p, dtype=np.float64))))


def classification_nll(probs, labels, eps: float = 1e-12) -> float:
    probs, labels = _probs_labels(probs, labels)
    picked = probs[np.arange(labels.shape[0]), labels]
    return float(-np.mean(np.log(np.maximum(picked, eps))))


def accuracy(probs_or_preds, labels: Iterable) -> float:
    arr = np.asarray(probs_or_preds)
    labels = np.asarray(labels).astype(np.int64).ravel()
    preds = arr.argmax(axis=1) if arr.ndim == 2 else arr.astype(np.int64)
    return float(np.mean(preds == labels))


def rmse(y, mu) -> float:
    y, mu = _flat(y, mu)
    return float(np.sqrt(np.mean((y - mu) ** 2)))
