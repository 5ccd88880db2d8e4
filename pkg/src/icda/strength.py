"""Augmentation strengths.

Two sources are provided: the direct rule based on angles between features
and classifier weights, and a small learned network fed with ten per-sample
training characteristics (used by the meta-learning variant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LinearHead
from .numerics import ContractViolation, cosine_matrix, make_rng, softmax

NUM_CHARACTERISTICS = 10
CHARACTERISTIC_NAMES = (
    "loss",
    "margin",
    "grad_norm",
    "entropy",
    "class_proportion",
    "class_mean_loss",
    "relative_loss",
    "relative_margin",
    "weight_norm_sq",
    "cos_target",
)
SQUASHED = (0, 5, 6)


@dataclass
class StrengthMatrix:
    alpha: np.ndarray  # (N, C), zero on the target column
    alpha_scalar: np.ndarray  # (N,)

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[1]

    @property
    def alpha_hat(self) -> np.ndarray:
        return self.alpha / (self.num_classes - 1)

    @classmethod
    def zeros(cls, n: int, num_classes: int) -> "StrengthMatrix":
        return cls(np.zeros((n, num_classes)), np.zeros(n))


def _check(features, head: LinearHead, labels):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[1] != head.w.shape[1] or labels.shape != (features.shape[0],):
        raise ContractViolation("features, head and labels have inconsistent shapes")
    return features, labels


def alpha_matrix(features, head: LinearHead, labels) -> np.ndarray:
    """alpha[i, c] = max(cos(h_i, w_c), 0) off the target column, 0 on it."""
    features, labels = _check(features, head, labels)
    a = np.maximum(cosine_matrix(features, head.w), 0.0)
    a[np.arange(labels.size), labels] = 0.0
    return a


def target_cosine(features, head: LinearHead, labels) -> np.ndarray:
    features, labels = _check(features, head, labels)
    return cosine_matrix(features, head.w)[np.arange(labels.size), labels]


def alpha_scalar_direct(features, head: LinearHead, labels) -> np.ndarray:
    return (1.0 - target_cosine(features, head, labels)) / 2.0


def alpha_scalar_noisy(cos_theta, tau: float = 0.9):
    """Direct strength, negated once it reaches ``tau``.

    Samples whose features point away from their (possibly wrong) label get
    a compensating margin instead of an enlarged one.
    """
    if not 0.0 < tau <= 1.0:
        raise ContractViolation("tau must lie in (0, 1]")
    a = (1.0 - np.asarray(cos_theta, dtype=np.float64)) / 2.0
    out = np.where(a < tau, a, -a)
    return float(out) if out.ndim == 0 else out


def direct_strengths(features, head: LinearHead, labels, noisy: bool = False, tau: float = 0.9) -> StrengthMatrix:
    """Both strength parts for a batch under the angle rule."""
    alpha = alpha_matrix(features, head, labels)
    cos_y = target_cosine(features, head, labels)
    scalar = alpha_scalar_noisy(cos_y, tau) if noisy else (1.0 - cos_y) / 2.0
    return StrengthMatrix(alpha, np.atleast_1d(np.asarray(scalar, dtype=np.float64)))


# --- training characteristics ---------------------------------------------


@dataclass
class ClassTrends:
    """Per-class EMA of loss and margin; NaN until a class is first seen."""

    loss: np.ndarray
    margin: np.ndarray
    decay: float = 0.1

    @classmethod
    def empty(cls, num_classes: int, decay: float = 0.1) -> "ClassTrends":
        return cls(np.full(num_classes, np.nan), np.full(num_classes, np.nan), decay)

    def copy(self) -> "ClassTrends":
        return ClassTrends(self.loss.copy(), self.margin.copy(), self.decay)

    def update(self, loss, margin, labels) -> None:
        for c in np.unique(labels):
            sel = labels == c
            for table, vals in ((self.loss, loss), (self.margin, margin)):
                v = float(np.mean(vals[sel]))
                table[c] = v if np.isnan(table[c]) else (1 - self.decay) * table[c] + self.decay * v

    def lookup(self, table: np.ndarray, values, labels) -> np.ndarray:
        """Tracked class average, falling back to the batch's own class mean."""
        out = table[labels].copy()
        missing = np.isnan(out)
        for c in np.unique(labels[missing]):
            sel = labels == c
            out[sel & missing] = np.mean(values[sel])
        return out


def sample_margin(q: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """q_y minus the largest probability among the other classes."""
    idx = np.arange(labels.size)
    others = q.copy()
    others[idx, labels] = -np.inf
    return q[idx, labels] - others.max(axis=1)


def extract_characteristics(logits, features, head: LinearHead, labels, class_proportion,
                            trends: ClassTrends) -> np.ndarray:
    """Raw (unsquashed) characteristics, one row of ten per sample.

    ``class_proportion`` holds N_c / N for the whole training set.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, C = logits.shape
    idx = np.arange(n)
    q = softmax(logits)
    logq = logits - logits.max(axis=1, keepdims=True)
    logq = logq - np.log(np.exp(logq).sum(axis=1, keepdims=True))
    loss = -logq[idx, labels]
    margin = sample_margin(q, labels)
    onehot = np.zeros_like(q)
    onehot[idx, labels] = 1.0
    grad_norm = np.linalg.norm(onehot - q, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(q > 0, q * np.log2(q), 0.0)
    entropy = -plogp.sum(axis=1)
    prop = np.asarray(class_proportion, dtype=np.float64)[labels]
    cls_loss = trends.lookup(trends.loss, loss, labels)
    cls_margin = trends.lookup(trends.margin, margin, labels)
    wnorm = np.sum(head.w[labels] ** 2, axis=1)
    cos_y = target_cosine(features, head, labels)
    return np.column_stack([
        loss, margin, grad_norm, entropy, prop, cls_loss,
        loss - cls_loss, margin - cls_margin, wnorm, cos_y,
    ])


def squash(zeta: np.ndarray) -> np.ndarray:
    """Bound the loss-valued columns with x -> x / (1 + |x|)."""
    z = np.array(zeta, dtype=np.float64, copy=True)
    for k in SQUASHED:
        z[:, k] = z[:, k] / (1.0 + np.abs(z[:, k]))
    return z


# --- strength generation network ------------------------------------------


@dataclass
class StrengthNet:
    W1: np.ndarray  # (hidden, 10)
    b1: np.ndarray
    W2: np.ndarray  # (1, hidden)
    b2: np.ndarray  # (1,)

    @classmethod
    def init(cls, rng=None, hidden: int = 100, zero: bool = False) -> "StrengthNet":
        if zero:
            return cls(np.zeros((hidden, NUM_CHARACTERISTICS)), np.zeros(hidden),
                       np.zeros((1, hidden)), np.zeros(1))
        rng = make_rng(rng)
        b1 = 1.0 / np.sqrt(NUM_CHARACTERISTICS)
        b2 = 1.0 / np.sqrt(hidden)
        return cls(rng.uniform(-b1, b1, (hidden, NUM_CHARACTERISTICS)), np.zeros(hidden),
                   rng.uniform(-b2, b2, (1, hidden)), np.zeros(1))

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self) -> "StrengthNet":
        return StrengthNet(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def strength_forward(net: StrengthNet, zeta: np.ndarray):
    """alpha = sigmoid(W2 relu(W1 zeta + b1) + b2) per row; returns (alpha, cache)."""
    zeta = np.atleast_2d(np.asarray(zeta, dtype=np.float64))
    pre = zeta @ net.W1.T + net.b1
    hid = np.maximum(pre, 0.0)
    alpha = _sigmoid(hid @ net.W2[0] + net.b2[0])
    return alpha, (zeta, pre, hid, alpha)


def strength_backward(net: StrengthNet, cache, d_alpha) -> dict[str, np.ndarray]:
    zeta, pre, hid, alpha = cache
    d_out = np.asarray(d_alpha, dtype=np.float64) * alpha * (1.0 - alpha)
    d_hid = np.outer(d_out, net.W2[0]) * (pre > 0)
    return {
        "W1": d_hid.T @ zeta,
        "b1": d_hid.sum(axis=0),
        "W2": (d_out @ hid)[None, :],
        "b2": np.array([d_out.sum()]),
    }
