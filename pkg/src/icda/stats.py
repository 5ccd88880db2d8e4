"""Online per-class feature statistics and confusion rates.

Means and covariances are merged batch by batch with the exact two-sample
pooling rule (population covariance, divide by count), so streaming over any
partition reproduces the statistics of the concatenated data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numerics import ContractViolation


@dataclass
class ClassStats:
    mean: np.ndarray  # (C, H)
    cov: np.ndarray  # (C, H, H) in full mode, (C, H) in diagonal mode
    count: np.ndarray  # (C,) int

    @classmethod
    def zeros(cls, num_classes: int, dim: int, diagonal: bool = False) -> "ClassStats":
        shape = (num_classes, dim) if diagonal else (num_classes, dim, dim)
        return cls(np.zeros((num_classes, dim)), np.zeros(shape), np.zeros(num_classes, np.int64))

    @property
    def diagonal(self) -> bool:
        return self.cov.ndim == 2

    @property
    def num_classes(self) -> int:
        return self.mean.shape[0]

    @property
    def dim(self) -> int:
        return self.mean.shape[1]

    def copy(self) -> "ClassStats":
        return ClassStats(self.mean.copy(), self.cov.copy(), self.count.copy())

    def to_diagonal(self) -> "ClassStats":
        if self.diagonal:
            return self.copy()
        return ClassStats(self.mean.copy(), np.diagonal(self.cov, axis1=1, axis2=2).copy(),
                          self.count.copy())

    def full_cov(self) -> np.ndarray:
        """Covariances as (C, H, H) regardless of mode."""
        if not self.diagonal:
            return self.cov
        return np.einsum("ch,hk->chk", self.cov, np.eye(self.dim))

    def to_dict(self) -> dict:
        return {
            "diagonal": self.diagonal,
            "count": self.count.tolist(),
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassStats":
        return cls(np.array(d["mean"], float), np.array(d["cov"], float),
                   np.array(d["count"], np.int64))

    def dump(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)


def batch_moments(features: np.ndarray, diagonal: bool = False):
    """Population mean and covariance of one batch."""
    m = features.mean(axis=0)
    centred = features - m
    if diagonal:
        return m, (centred**2).mean(axis=0)
    return m, centred.T @ centred / features.shape[0]


def update_stats(stats: ClassStats, features, labels) -> ClassStats:
    """Merge a batch into ``stats`` in place and return it."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[1] != stats.dim:
        raise ContractViolation(f"feature shape {features.shape} does not match H={stats.dim}")
    if labels.size and (labels.min() < 0 or labels.max() >= stats.num_classes):
        raise ContractViolation("label index out of range")
    for c in np.unique(labels):
        fc = features[labels == c]
        m = fc.shape[0]
        n = int(stats.count[c])
        mu_b, cov_b = batch_moments(fc, stats.diagonal)
        tot = n + m
        diff = stats.mean[c] - mu_b
        cross = np.outer(diff, diff) if not stats.diagonal else diff * diff
        stats.cov[c] = (n * stats.cov[c] + m * cov_b) / tot + (n * m / tot**2) * cross
        if not stats.diagonal:
            stats.cov[c] = 0.5 * (stats.cov[c] + stats.cov[c].T)
        stats.mean[c] = (n * stats.mean[c] + m * mu_b) / tot
        stats.count[c] = tot
    return stats


def priors(stats_or_counts) -> np.ndarray:
    counts = stats_or_counts.count if isinstance(stats_or_counts, ClassStats) else stats_or_counts
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ContractViolation("priors need at least one counted sample")
    return counts / total


def log_prior_shift(pi: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """delta[i, c] = log(pi_c / pi_{y_i}); zero on the target column."""
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(pi <= 0):
        raise ContractViolation("log prior shift needs strictly positive priors")
    lp = np.log(pi)
    return lp[None, :] - lp[labels][:, None]


@dataclass
class ConfusionRates:
    eps: np.ndarray  # (C, C)

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionRates":
        return cls(np.zeros((num_classes, num_classes)))

    def copy(self) -> "ConfusionRates":
        return ConfusionRates(self.eps.copy())


def batch_confusion(predictions, labels, num_classes: int):
    """Row-normalised confusion of one batch and the mask of classes present."""
    conf = np.zeros((num_classes, num_classes))
    np.add.at(conf, (labels, predictions), 1.0)
    n = conf.sum(axis=1)
    present = n > 0
    conf[present] /= n[present, None]
    return conf, present


def update_confusion(rates: ConfusionRates, predictions, labels, ema_decay: float = 0.1) -> ConfusionRates:
    if not 0.0 < ema_decay <= 1.0:
        raise ContractViolation("ema_decay must lie in (0, 1]")
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    C = rates.eps.shape[0]
    conf, present = batch_confusion(predictions, labels, C)
    eps = rates.eps.copy()
    eps[present] = (1.0 - ema_decay) * eps[present] + ema_decay * conf[present]
    return ConfusionRates(eps)
