"""Bilevel strength learning on a small clean metadata set.

Each iteration takes a virtual SGD step of the linear head on the ICDA
loss, measures plain CE of the virtually updated head on a metadata batch,
and differentiates that meta loss exactly (second order) with respect to
the per-sample strengths, the class means and the class covariances. The
strength network and the statistics take one step along those gradients,
after which the real classifier step uses the refreshed strengths.

With ``head' = head - eta1 * grad L(theta)`` and ``v = dCE_meta/dhead'``,
``dCE_meta/dtheta = -eta1 * d<grad L(theta), v>/dtheta``; the inner product
is differentiated in closed form below.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .datasets import Dataset
from .engine import BatchSampler, LossSettings, RunState, apply_update
from .model import LinearHead, SgdConfig, backbone_forward, forward
from .numerics import ContractViolation, make_rng, softmax
from .stats import ClassStats, update_stats
from .strength import (ClassTrends, StrengthMatrix, StrengthNet, alpha_matrix,
                       extract_characteristics, sample_margin, squash, strength_backward,
                       strength_forward)

PSD_TOL = 1e-12


@dataclass
class MetaState:
    net: StrengthNet
    eta2: float = 1e-2
    meta_batch: int = 32
    trends: ClassTrends | None = None

    def __post_init__(self):
        if self.eta2 < 0:
            raise ContractViolation("meta learning rate must be non-negative")


@dataclass
class InnerProblem:
    """Everything the virtual step depends on for one training batch."""

    features: np.ndarray
    labels: np.ndarray
    head: LinearHead
    stats: ClassStats
    strengths: StrengthMatrix
    lam: float
    beta: float
    pi: np.ndarray

    def loss(self) -> L.LossResult:
        terms = L.icda_perturbations(self.features, self.labels, self.head, self.stats,
                                     self.strengths, self.lam, self.beta, self.pi)
        return L.icda_loss_from_terms(self.features, self.labels, self.head, self.stats,
                                      self.strengths, terms), terms


@dataclass
class MetaGradients:
    meta_loss: float
    alpha: np.ndarray  # d meta / d alpha_i
    mean: np.ndarray  # d meta / d mu
    cov: np.ndarray  # d meta / d Sigma
    head_prime: LinearHead = field(repr=False, default=None)


def virtual_step(problem: InnerProblem, eta1: float) -> tuple[LinearHead, L.LossResult]:
    """head' = head - eta1 * grad_head(ICDA loss); the backbone is held fixed."""
    res, _ = problem.loss()
    head = problem.head
    return LinearHead(head.w - eta1 * res.d_w, head.b - eta1 * res.d_b), res


def meta_ce(head: LinearHead, meta_features, meta_labels):
    """CE of the meta batch and its gradient w.r.t. (w, b)."""
    logits = meta_features @ head.w.T + head.b
    loss, g = L.ce_loss(logits, meta_labels)
    return loss, g.T @ meta_features, g.sum(axis=0)


def inner_product_grads(problem: InnerProblem, res: L.LossResult, V: np.ndarray, vb: np.ndarray):
    """Gradients of F = <grad_head ICDA loss, (V, vb)> w.r.t. alpha_i, mu and Sigma."""
    h, y, head, stats = problem.features, problem.labels, problem.head, problem.stats
    lam = problem.lam
    n = y.size
    idx = np.arange(n)
    a_hat = problem.strengths.alpha_hat
    terms = L.icda_perturbations(h, y, head, stats, problem.strengths, lam, problem.beta, problem.pi)
    M = terms.mixed_cov
    D = L._weight_diffs(head.w, y)  # d_ic = w_c - w_y
    E = L._weight_diffs(V, y)  # e_ic = V_c - V_y
    kappa = (terms.phi < L.PHI_CLAMP).astype(np.float64)
    kappa[idx, y] = 0.0
    g = res.d_logits  # already carries 1/n
    q = g.copy()
    q[idx, y] += 1.0 / n
    q *= n  # softmax of the augmented logits
    lin = L.icda_lin_vec(stats, problem.strengths, lam)
    MD = L._mat_vec(M, D)
    r = h @ V.T + vb + kappa * (lam * np.einsum("nch,nch->nc", E, MD)
                                + np.einsum("nch,nch->nc", E, lin))
    s = q * (r - np.sum(q * r, axis=1, keepdims=True)) / n
    sk = s * kappa
    gk = g * kappa

    d_alpha = problem.beta * sk.sum(axis=1)
    coef = lam * a_hat
    d_mean = np.einsum("nc,nch->ch", coef * sk, D) + np.einsum("nc,nch->ch", coef * gk, E)
    if M.ndim == 2:
        G = 0.5 * lam * np.einsum("nc,nch->nh", sk, D * D) + lam * np.einsum("nc,nch->nh", gk, E * D)
    else:
        Dt = np.swapaxes(D, 1, 2)
        G = 0.5 * lam * np.matmul(Dt * sk[:, None, :], D)
        ED = np.matmul(np.swapaxes(E, 1, 2) * gk[:, None, :], D)
        G = G + 0.5 * lam * (ED + np.swapaxes(ED, 1, 2))
    # dM_i/dSigma_k = [y_i == k] + a_hat[i, k]
    weight = a_hat.copy()
    weight[idx, y] += 1.0
    d_cov = np.tensordot(weight.T, G, axes=(1, 0))
    return d_alpha, d_mean, d_cov


def meta_gradients(problem: InnerProblem, eta1: float, meta_features, meta_labels) -> MetaGradients:
    if len(meta_labels) == 0:
        raise ContractViolation("meta batch is empty")
    head_p, res = virtual_step(problem, eta1)
    loss, V, vb = meta_ce(head_p, meta_features, meta_labels)
    da, dm, dc = inner_product_grads(problem, res, V, vb)
    return MetaGradients(loss, -eta1 * da, -eta1 * dm, -eta1 * dc, head_p)


def meta_update_omega(net: StrengthNet, net_cache, grads: MetaGradients, eta2: float) -> StrengthNet:
    g = strength_backward(net, net_cache, grads.alpha)
    new = net.copy()
    for name, p in new.params().items():
        p -= eta2 * g[name]
    return new


def repair_psd(cov: np.ndarray) -> np.ndarray:
    """Symmetrise and clamp negative eigenvalues (diagonal mode: clamp entries)."""
    if cov.ndim == 2:
        return np.maximum(cov, 0.0)
    out = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    for c in range(out.shape[0]):
        vals, vecs = np.linalg.eigh(out[c])
        if vals.min() < -PSD_TOL:
            out[c] = (vecs * np.maximum(vals, 0.0)) @ vecs.T
            out[c] = 0.5 * (out[c] + out[c].T)
    return out


def meta_update_stats(stats: ClassStats, grads: MetaGradients, eta2: float) -> ClassStats:
    new = stats.copy()
    new.mean = stats.mean - eta2 * grads.mean
    new.cov = repair_psd(stats.cov - eta2 * grads.cov)
    return new


def real_step(state: RunState, cache, problem: InnerProblem, sgd: SgdConfig) -> L.LossResult:
    """Full SGD step (backbone and head) on the ICDA loss with refreshed strengths."""
    res, _ = problem.loss()
    apply_update(state, cache, res, sgd)
    return res


@dataclass
class MetaTraceRow:
    iteration: int
    meta_loss: float
    train_loss: float
    mean_alpha: float
    lam: float


def meta_iteration(state: RunState, meta: MetaState, x, y, xm, ym, settings: LossSettings,
                   sgd: SgdConfig, T: int) -> MetaTraceRow:
    """One bilevel step: meta-gradients, strength/statistics update, real step."""
    t = state.iteration + 1
    cfg = settings.icda
    h, logits, cache = forward(state.backbone, state.head, x)
    update_stats(state.stats, h, y)
    lam = L.lambda_at(t, T, cfg.lambda0)
    alpha = alpha_matrix(h, state.head, y)
    zeta = squash(extract_characteristics(logits, h, state.head, y, state.train_prior, meta.trends))
    a_scalar, net_cache = strength_forward(meta.net, zeta)
    problem = InnerProblem(h, y, state.head, state.stats, StrengthMatrix(alpha, a_scalar),
                           lam, cfg.beta, state.train_prior)
    eta1 = sgd.lr_at(state.iteration)
    hm, _, _ = backbone_forward(state.backbone, xm)
    grads = meta_gradients(problem, eta1, hm, ym)
    meta.net = meta_update_omega(meta.net, net_cache, grads, meta.eta2)
    state.stats = meta_update_stats(state.stats, grads, meta.eta2)
    a_new, _ = strength_forward(meta.net, zeta)
    problem = InnerProblem(h, y, state.head, state.stats, StrengthMatrix(alpha, a_new),
                           lam, cfg.beta, state.train_prior)
    res = real_step(state, cache, problem, sgd)
    q = softmax(logits)
    loss_i = -np.log(np.maximum(q[np.arange(y.size), y], 1e-300))
    meta.trends.update(loss_i, sample_margin(q, y), y)
    state.iteration = t
    return MetaTraceRow(t, grads.meta_loss, res.loss, float(a_new.mean()), lam)


def run_meta_icda(state: RunState, meta: MetaState, train: Dataset, meta_set: Dataset,
                  settings: LossSettings, sgd: SgdConfig, T: int, batch_size: int, rng,
                  on_iteration=None) -> list[MetaTraceRow]:
    """Run ``T`` bilevel iterations in place on ``state`` and ``meta``."""
    if len(meta_set) == 0:
        raise ContractViolation("meta set is empty")
    # the train batches use ``rng`` directly so that, with a frozen strength
    # net, the batch sequence matches a plain ICDA run on the same stream
    rng = make_rng(rng)
    (r_meta,) = rng.spawn(1)
    sampler = BatchSampler(len(train), batch_size, rng)
    meta_sampler = BatchSampler(len(meta_set), meta.meta_batch, r_meta)
    if meta.trends is None:
        meta.trends = ClassTrends.empty(train.num_classes)
    trace = []
    for _ in range(T):
        idx = sampler.next()
        midx = meta_sampler.next()
        row = meta_iteration(state, meta, train.features[idx], train.labels[idx],
                             meta_set.features[midx], meta_set.labels[midx], settings, sgd, T)
        trace.append(row)
        if on_iteration is not None:
            on_iteration(state, sampler)
    return trace
