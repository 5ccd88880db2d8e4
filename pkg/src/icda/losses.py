"""Logit-perturbation losses: CE, LA, ISDA, RISDA and ICDA.

Every loss here is a cross entropy over an augmented logit vector
``u~ = u + phi`` where ``phi`` is zero on the target class. For the
covariance-based methods ``phi`` also depends on the classifier weights
through ``dw = w_c - w_y``; that dependence is differentiated, while the
class statistics, priors and strengths are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LinearHead
from .numerics import ContractViolation, softmax
from .stats import ClassStats, ConfusionRates, log_prior_shift, priors
from .strength import StrengthMatrix

PHI_CLAMP = 50.0
LAMBDA_GRID = (0.1, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class IcdaConfig:
    lambda0: float = 0.5
    beta: float = 0.1
    tau: float = 0.9
    diagonal: bool = False
    noise_mode: bool = False

    def __post_init__(self):
        if self.lambda0 < 0 or self.beta < 0:
            raise ContractViolation("lambda0 and beta must be non-negative")


@dataclass
class PerturbationTerms:
    """Per-sample, per-class pieces of the ICDA logit perturbation."""

    P: np.ndarray  # quadratic form under the mixed covariance
    Q: np.ndarray  # kept mean term  dw . alpha_hat * mu_c
    delta: np.ndarray  # log(pi_c / pi_y)
    margin: np.ndarray  # beta * alpha_i, per sample
    lam: float
    phi: np.ndarray  # assembled, unclamped, zero on target column
    mixed_cov: np.ndarray  # Sigma_y + sum_j alpha_hat_j Sigma_j per sample


@dataclass
class LossResult:
    loss: float
    per_sample: np.ndarray
    d_logits: np.ndarray  # gradient w.r.t. the augmented logits (batch-mean scaled)
    d_w: np.ndarray
    d_b: np.ndarray
    d_features: np.ndarray
    aug_logits: np.ndarray


def lambda_at(t: float, T: float, lambda0: float) -> float:
    if T <= 0 or t < 0 or t > T:
        raise ContractViolation("lambda_at needs 0 <= t <= T and T > 0")
    return (t / T) * lambda0


def _shifted_ce(logits: np.ndarray, labels: np.ndarray, shift: np.ndarray | None):
    """Mean CE over ``logits + shift``; returns (loss, per-sample, grad wrt shifted logits)."""
    u = logits if shift is None else logits + shift
    n = u.shape[0]
    idx = np.arange(n)
    m = u.max(axis=1, keepdims=True)
    lse = np.log(np.exp(u - m).sum(axis=1)) + m[:, 0]
    per = lse - u[idx, labels]
    g = softmax(u)
    g[idx, labels] -= 1.0
    g /= n
    return float(per.mean()), per, g, u


def ce_loss(logits, labels):
    """Mean cross entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    loss, _, g, _ = _shifted_ce(logits, labels, None)
    return loss, g


def la_shift(pi, labels) -> np.ndarray:
    return log_prior_shift(pi, labels)


def la_loss(logits, labels, pi):
    """CE after adding log-priors; written as the relative shift log(pi_c/pi_y)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    loss, _, g, _ = _shifted_ce(logits, labels, la_shift(pi, labels))
    return loss, g


def _weight_diffs(w: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """dw[i, c] = w_c - w_{y_i}, shape (N, C, H)."""
    return w[None, :, :] - w[labels][:, None, :]


def _quad(D: np.ndarray, M: np.ndarray) -> np.ndarray:
    """D[i,c] M[i] D[i,c]^T for full (N,H,H) or diagonal (N,H) M."""
    return np.sum(D * _mat_vec(M, D), axis=2)


def _mat_vec(M: np.ndarray, D: np.ndarray) -> np.ndarray:
    """M[i] D[i,c] for every c, shape (N, C, H)."""
    if M.ndim == 2:
        return M[:, None, :] * D
    return np.matmul(D, np.swapaxes(M, 1, 2))


def _weighted_cov(weights: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """sum_c weights[i, c] * cov[c] for every i (works for full and diagonal cov)."""
    C = cov.shape[0]
    return (weights @ cov.reshape(C, -1)).reshape((weights.shape[0],) + cov.shape[1:])


def _require_stats(stats: ClassStats, labels: np.ndarray) -> None:
    if np.any(stats.count[labels] == 0):
        raise ContractViolation("class statistics missing for a class present in the batch")


def _perturbed_ce(features, labels, head: LinearHead, phi, quad_coef, M, lin_vec) -> LossResult:
    """CE over ``u + min(phi, clamp)`` with phi = (quad_coef/2) dw M dw^T + dw.lin_vec + const.

    ``M`` is per-sample (N,H,H)/(N,H) or None; ``lin_vec`` is (N,C,H) or None.
    Only the dw factors carry gradient.
    """
    n = labels.size
    idx = np.arange(n)
    logits = features @ head.w.T + head.b
    clamped = None if phi is None else np.minimum(phi, PHI_CLAMP)
    loss, per, g, u = _shifted_ce(logits, labels, clamped)
    d_w = g.T @ features
    d_b = g.sum(axis=0)
    d_h = g @ head.w
    if M is not None or lin_vec is not None:
        D = _weight_diffs(head.w, labels)
        R = np.zeros_like(D)
        if M is not None:
            R = R + quad_coef * _mat_vec(M, D)
        if lin_vec is not None:
            R = R + lin_vec
        active = (phi < PHI_CLAMP).astype(np.float64)
        active[idx, labels] = 0.0
        T = (g * active)[:, :, None] * R
        d_w = d_w + T.sum(axis=0)
        np.add.at(d_w, labels, -T.sum(axis=1))
    return LossResult(loss, per, g, d_w, d_b, d_h, u)


def isda_phi(features, labels, head: LinearHead, stats: ClassStats, lam: float):
    labels = np.asarray(labels, dtype=np.int64)
    M = stats.cov[labels]
    D = _weight_diffs(head.w, labels)
    return (0.5 * lam) * _quad(D, M), M


def isda_loss(features, labels, head: LinearHead, stats: ClassStats, lam: float) -> LossResult:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _require_stats(stats, labels)
    phi, M = isda_phi(features, labels, head, stats, lam)
    return _perturbed_ce(features, labels, head, phi, lam, M, None)


def risda_phi(features, labels, head: LinearHead, stats: ClassStats, rates: ConfusionRates,
              alpha_r: float, beta_r: float):
    labels = np.asarray(labels, dtype=np.int64)
    eps = rates.eps.copy()
    np.fill_diagonal(eps, 0.0)
    e = eps[labels]  # (N, C), zero on target
    if stats.diagonal:
        M = stats.cov[labels] + e @ stats.cov
    else:
        M = stats.cov[labels] + _weighted_cov(e, stats.cov)
    mean_dir = e @ stats.mean  # (N, H), same for every c
    D = _weight_diffs(head.w, labels)
    lin = alpha_r * np.broadcast_to(mean_dir[:, None, :], D.shape)
    phi = beta_r * _quad(D, M) + np.einsum("nch,nch->nc", D, lin)
    return phi, M, lin


def risda_loss(features, labels, head: LinearHead, stats: ClassStats, rates: ConfusionRates,
               alpha_r: float = 0.5, beta_r: float = 0.5) -> LossResult:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _require_stats(stats, labels)
    phi, M, lin = risda_phi(features, labels, head, stats, rates, alpha_r, beta_r)
    return _perturbed_ce(features, labels, head, phi, 2.0 * beta_r, M, lin)


def mixed_covariance(stats: ClassStats, labels, alpha_hat) -> np.ndarray:
    """Sigma_{y_i} + sum_{j != y_i} alpha_hat[i, j] Sigma_j, once per sample."""
    if stats.diagonal:
        return stats.cov[labels] + alpha_hat @ stats.cov
    return stats.cov[labels] + _weighted_cov(alpha_hat, stats.cov)


def icda_perturbations(features, labels, head: LinearHead, stats: ClassStats,
                       strengths: StrengthMatrix, lam: float, beta: float,
                       pi=None) -> PerturbationTerms:
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    idx = np.arange(n)
    pi = priors(stats) if pi is None else np.asarray(pi, dtype=np.float64)
    a_hat = strengths.alpha_hat
    M = mixed_covariance(stats, labels, a_hat)
    D = _weight_diffs(head.w, labels)
    P = _quad(D, M)
    Q = a_hat * np.einsum("nch,ch->nc", D, stats.mean)
    delta = la_shift(pi, labels)
    margin = beta * strengths.alpha_scalar
    phi = (0.5 * lam) * P + lam * Q
    phi = phi + delta
    phi = phi + margin[:, None]
    phi[idx, labels] = 0.0
    return PerturbationTerms(P, Q, delta, margin, lam, phi, M)


def icda_loss(features, labels, head: LinearHead, stats: ClassStats, strengths: StrengthMatrix,
              cfg: IcdaConfig, t: float, T: float, pi=None) -> LossResult:
    """Batch-mean ICDA surrogate with gradients for head and features."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    lam = lambda_at(t, T, cfg.lambda0)
    terms = icda_perturbations(features, labels, head, stats, strengths, lam, cfg.beta, pi)
    return icda_loss_from_terms(features, labels, head, stats, strengths, terms)


def icda_lin_vec(stats: ClassStats, strengths: StrengthMatrix, lam: float) -> np.ndarray:
    return lam * strengths.alpha_hat[:, :, None] * stats.mean[None, :, :]


def icda_loss_from_terms(features, labels, head, stats, strengths, terms: PerturbationTerms) -> LossResult:
    lin = icda_lin_vec(stats, strengths, terms.lam)
    return _perturbed_ce(features, labels, head, terms.phi, terms.lam, terms.mixed_cov, lin)
