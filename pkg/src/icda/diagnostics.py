"""First-order regularizer analysis of the logit-perturbation losses.

Each loss is CE over ``u + du``. Expanding to first order around the plain
logits gives ``CE(u) + (q - y)^T du``; the second term is the implicit
regularizer, which splits into class-wise shift, mapped-variance,
boundary-distance and sample-wise margin parts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .losses import _quad, _weight_diffs, mixed_covariance
from .model import LinearHead
from .numerics import ContractViolation, softmax
from .stats import ClassStats, ConfusionRates, log_prior_shift
from .strength import StrengthMatrix, sample_margin

METHODS = ("la", "isda", "risda", "icda")
COMPONENTS = ("margin", "variance", "boundary", "delta")


@dataclass
class BatchState:
    """Everything the regularizers read; unused fields may stay ``None``."""

    features: np.ndarray
    labels: np.ndarray
    head: LinearHead
    stats: ClassStats | None = None
    pi: np.ndarray | None = None
    strengths: StrengthMatrix | None = None
    rates: ConfusionRates | None = None
    lam: float = 0.0
    beta: float = 0.0
    alpha_r: float = 0.5
    beta_r: float = 0.5

    @property
    def logits(self) -> np.ndarray:
        return self.features @ self.head.w.T + self.head.b


@dataclass
class RegularizerReport:
    method: str
    total: float
    components: dict = field(default_factory=dict)
    per_sample: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"method": self.method, "total": self.total, "components": dict(self.components)}


def _off_target(q: np.ndarray, labels: np.ndarray) -> np.ndarray:
    qo = q.copy()
    qo[np.arange(labels.size), labels] = 0.0
    return qo


def _risda_parts(s: BatchState):
    eps = s.rates.eps.copy()
    np.fill_diagonal(eps, 0.0)
    e = eps[s.labels]
    D = _weight_diffs(s.head.w, s.labels)
    M = mixed_covariance(s.stats, s.labels, e)
    var = s.beta_r * _quad(D, M)
    bnd = s.alpha_r * np.einsum("nch,nh->nc", D, e @ s.stats.mean)
    return var, bnd


def _icda_parts(s: BatchState):
    a_hat = s.strengths.alpha_hat
    D = _weight_diffs(s.head.w, s.labels)
    M = mixed_covariance(s.stats, s.labels, a_hat)
    var = 0.5 * s.lam * _quad(D, M)
    bnd = s.lam * a_hat * np.einsum("nch,ch->nc", D, s.stats.mean)
    return var, bnd


def regularizer(method: str, s: BatchState) -> RegularizerReport:
    """Closed-form first-order regularizer of ``method`` on a batch.

    ICDA's constant ``+beta*alpha_i`` is left out; the ground-truth
    probability enters only through ``-beta*alpha_i*q_y``.
    """
    if method not in METHODS:
        raise ContractViolation(f"unknown method tag {method!r}")
    labels = np.asarray(s.labels, dtype=np.int64)
    n = labels.size
    q = softmax(s.logits)
    qo = _off_target(q, labels)
    parts = {k: np.zeros(n) for k in COMPONENTS}
    if method in ("la", "icda"):
        parts["delta"] = np.sum(qo * log_prior_shift(s.pi, labels), axis=1)
    if method == "isda":
        D = _weight_diffs(s.head.w, labels)
        parts["variance"] = np.sum(qo * 0.5 * s.lam * _quad(D, s.stats.cov[labels]), axis=1)
    elif method == "risda":
        var, bnd = _risda_parts(s)
        parts["variance"] = np.sum(qo * var, axis=1)
        parts["boundary"] = np.sum(qo * bnd, axis=1)
    elif method == "icda":
        var, bnd = _icda_parts(s)
        parts["variance"] = np.sum(qo * var, axis=1)
        parts["boundary"] = np.sum(qo * bnd, axis=1)
        parts["margin"] = -s.beta * s.strengths.alpha_scalar * q[np.arange(n), labels]
    per = sum(parts[k] for k in COMPONENTS)
    comps = {k: float(v.sum()) for k, v in parts.items()}
    return RegularizerReport(method, float(per.sum()), comps, per)


def perturbation_vector(method: str, s: BatchState) -> np.ndarray:
    """The full logit perturbation du (N x C) each loss applies."""
    labels = np.asarray(s.labels, dtype=np.int64)
    n, idx = labels.size, np.arange(labels.size)
    C = s.head.w.shape[0]
    if method == "la":
        return np.broadcast_to(np.log(s.pi), (n, C)).copy()
    if method == "isda":
        D = _weight_diffs(s.head.w, labels)
        return 0.5 * s.lam * _quad(D, s.stats.cov[labels])
    if method == "risda":
        var, bnd = _risda_parts(s)
        du = var + bnd
        du[idx, labels] = 0.0
        return du
    if method == "icda":
        var, bnd = _icda_parts(s)
        du = var + bnd + log_prior_shift(s.pi, labels)
        du[idx, labels] = -s.beta * s.strengths.alpha_scalar
        return du
    raise ContractViolation(f"unknown method tag {method!r}")


def dropped_constant(method: str, s: BatchState) -> float:
    """Terms of (q - y)^T du that the closed-form regularizer omits."""
    if method == "icda":
        return float(np.sum(s.beta * s.strengths.alpha_scalar))
    return 0.0


def ce_sum(u: np.ndarray, labels: np.ndarray) -> float:
    m = u.max(axis=1, keepdims=True)
    lse = np.log(np.exp(u - m).sum(axis=1)) + m[:, 0]
    return float(np.sum(lse - u[np.arange(labels.size), labels]))


def taylor_check(u, labels, du, eps_list, loss_fn=None, grad=None) -> list[dict]:
    """Remainder of the first-order expansion along ``du`` for each eps.

    Rows carry ``eps``, ``err`` and ``ratio`` (err at this eps over err at
    the previous one; ``None`` for the first row).
    """
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    du = np.atleast_2d(np.asarray(du, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    eps_list = [float(e) for e in eps_list]
    if any(e <= 0 for e in eps_list) or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ContractViolation("eps values must be positive and decreasing")
    loss_fn = loss_fn or (lambda v: ce_sum(v, labels))
    if grad is None:
        grad = softmax(u)
        grad[np.arange(labels.size), labels] -= 1.0
    base = loss_fn(u)
    lin = float(np.sum(grad * du))
    rows, prev = [], None
    for e in eps_list:
        err = abs(loss_fn(u + e * du) - base - e * lin)
        ratio = None if prev is None or prev == 0.0 else err / prev
        rows.append({"eps": e, "err": err, "ratio": ratio})
        prev = err
    return rows


def mapped_variance(head: LinearHead, c: int, y: int, cov_y) -> float:
    if c == y:
        raise ContractViolation("mapped variance needs c != y")
    dw = head.w[c] - head.w[y]
    cov_y = np.asarray(cov_y, dtype=np.float64)
    if cov_y.ndim == 1:
        return float(dw @ (cov_y * dw))
    return float(dw @ cov_y @ dw)


def boundary_product(head: LinearHead, c: int, y: int, mu_c) -> float:
    return float((head.w[c] - head.w[y]) @ np.asarray(mu_c, dtype=np.float64))


def boundary_distance(head: LinearHead, c: int, y: int, mu_c) -> float:
    """Signed distance from ``mu_c`` to the bias-free boundary between c and y."""
    if c == y:
        raise ContractViolation("boundary distance needs c != y")
    dw = head.w[c] - head.w[y]
    norm = np.linalg.norm(dw)
    if norm < 1e-12:
        raise ContractViolation("degenerate boundary: w_c and w_y coincide")
    return float(dw @ np.asarray(mu_c, dtype=np.float64) / norm)


def margin_distribution(logits, labels, bins: int = 20, small: float = 0.2) -> dict:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    margins = sample_margin(softmax(logits), labels)
    counts, edges = np.histogram(margins, bins=bins, range=(-1.0, 1.0))
    correct = margins > 0
    frac = float(np.mean(margins[correct] < small)) if correct.any() else 0.0
    return {
        "margins": margins,
        "bin_left": edges[:-1].tolist(),
        "count": counts.tolist(),
        "small_margin_fraction": frac,
        "mean_margin": float(margins.mean()),
    }


def write_margin_csv(dist: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_left", "count"])
        for left, cnt in zip(dist["bin_left"], dist["count"]):
            w.writerow([repr(left), cnt])


def head_geometry(head: LinearHead, stats: ClassStats) -> dict:
    """Mapped variances and boundary distances for every ordered class pair."""
    C = head.w.shape[0]
    var = np.zeros((C, C))
    dist = np.full((C, C), np.nan)
    prod = np.zeros((C, C))
    for y in range(C):
        for c in range(C):
            if c == y:
                continue
            var[y, c] = mapped_variance(head, c, y, stats.cov[y])
            prod[y, c] = boundary_product(head, c, y, stats.mean[c])
            try:
                dist[y, c] = boundary_distance(head, c, y, stats.mean[c])
            except ContractViolation:
                pass
    return {
        "mapped_variance": var.tolist(),
        "boundary_product": prod.tolist(),
        "boundary_distance": np.where(np.isnan(dist), None, dist).tolist(),
    }
