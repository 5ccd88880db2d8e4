"""Explicit Monte-Carlo realisation of the feature augmentation.

The surrogate losses replace an expectation over augmented features by a
closed form. This module materialises the augmented features instead, so
the closed-form upper bound can be checked against brute-force sampling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .model import LinearHead
from .numerics import log_sum_exp, make_rng, sample_mvn
from .stats import ClassStats


@dataclass(frozen=True)
class McConfig:
    M: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")


@dataclass
class BoundRecord:
    seed: int
    lam: float
    M: int
    mc_estimate: float
    se: float
    bound: float
    passed: bool

    def to_json(self) -> str:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return json.dumps(d)


def _cov(stats: ClassStats, c: int) -> np.ndarray:
    return np.diag(stats.cov[c]) if stats.diagonal else stats.cov[c]


def augmentation_params(h, y: int, c: int, alpha: float, lam: float, stats: ClassStats):
    """Mean and covariance of the augmented feature of ``h`` towards class ``c``."""
    mean = np.asarray(h, dtype=np.float64) + lam * alpha * stats.mean[c]
    cov = lam * (_cov(stats, y) + alpha * _cov(stats, c))
    return mean, cov


def sample_augmented(h, y: int, c: int, alpha: float, lam: float, stats: ClassStats, rng,
                     size: int | None = None) -> np.ndarray:
    if c == y:
        raise ValueError("augmentation target must differ from the label")
    mean, cov = augmentation_params(h, y, c, alpha, lam, stats)
    return sample_mvn(mean, 0.5 * (cov + cov.T), make_rng(rng), size)


def _ce_rows(logits: np.ndarray, y: int) -> np.ndarray:
    return log_sum_exp(logits, axis=1) - logits[:, y]


def pair_weights(labels, alpha: np.ndarray, pi) -> np.ndarray:
    """N~[i, c] = alpha[i, c] / pi_{y_i} (zero on the target column)."""
    pi = np.asarray(pi, dtype=np.float64)
    w = alpha / pi[labels][:, None]
    w[np.arange(len(labels)), labels] = 0.0
    return w


def mc_expected_loss(features, labels, head: LinearHead, stats: ClassStats, alpha: np.ndarray,
                     pi, lam: float, M: int, rng) -> tuple[float, float]:
    """Weighted Monte-Carlo estimate of the expected augmented CE and its standard error.

    Each (i, c) pair with positive weight gets ``M`` independent draws.
    """
    rng = make_rng(rng)
    labels = np.asarray(labels, dtype=np.int64)
    weights = pair_weights(labels, alpha, pi)
    total = weights.sum()
    if total <= 0:
        raise ValueError("all augmentation weights are zero")
    pairs = [(i, c) for i in range(labels.size) for c in range(alpha.shape[1]) if weights[i, c] > 0]
    streams = rng.spawn(len(pairs))
    est = 0.0
    var = 0.0
    for (i, c), r in zip(pairs, streams):
        y = int(labels[i])
        draws = sample_augmented(features[i], y, c, alpha[i, c], lam, stats, r, size=M)
        ce = _ce_rows(draws @ head.w.T + head.b, y)
        p = weights[i, c] / total
        est += p * ce.mean()
        if M > 1:
            var += p * p * ce.var(ddof=1) / M
    return float(est), float(np.sqrt(var))


def surrogate_upper_bound(features, labels, head: LinearHead, stats: ClassStats, alpha: np.ndarray,
                          pi, lam: float) -> float:
    """Closed-form bound on the expected augmented CE (full mean term, 1/pi weights, no clamp).

    Per pair (i, c): log(1 + sum_{j != y} exp[f_j - f_y + lam/2 dw_j S dw_j^T + lam dw_j alpha mu_c])
    with S = Sigma_y + alpha Sigma_c, weighted by alpha[i, c] / pi_y.
    """
    labels = np.asarray(labels, dtype=np.int64)
    features = np.asarray(features, dtype=np.float64)
    weights = pair_weights(labels, alpha, pi)
    total = weights.sum()
    logits = features @ head.w.T + head.b
    acc = 0.0
    C = head.w.shape[0]
    for i in range(labels.size):
        y = int(labels[i])
        dw = head.w - head.w[y]
        for c in range(C):
            if weights[i, c] <= 0:
                continue
            a = alpha[i, c]
            S = _cov(stats, y) + a * _cov(stats, c)
            P = np.einsum("jh,hk,jk->j", dw, S, dw)
            Q = a * dw @ stats.mean[c]
            z = logits[i] - logits[i, y] + 0.5 * lam * P + lam * Q
            z[y] = 0.0  # the j = y entry is the "1 +" term
            acc += weights[i, c] * log_sum_exp(z)
    return float(acc / total)


def jensen_gap_parts(features, labels, head, stats, alpha, pi, lam, M, rng):
    """Estimate, SE and bound in one call (the pieces of a BoundRecord)."""
    est, se = mc_expected_loss(features, labels, head, stats, alpha, pi, lam, M, rng)
    bound = surrogate_upper_bound(features, labels, head, stats, alpha, pi, lam)
    return est, se, bound


def mgf_check(mu: float, sigma: float, t: float, n: int, rng) -> tuple[float, float, float]:
    """Empirical E[exp(tX)], its SE, and exp(t mu + sigma^2 t^2 / 2) for X ~ N(mu, sigma^2)."""
    x = make_rng(rng).normal(mu, sigma, n)
    e = np.exp(t * x)
    return float(e.mean()), float(e.std(ddof=1) / np.sqrt(n)), float(np.exp(t * mu + 0.5 * sigma**2 * t**2))
