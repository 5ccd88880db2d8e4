"""Single-run training state and the per-iteration update shared by every method."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .datasets import Dataset
from .model import (Backbone, LinearHead, SgdConfig, backward_backbone, forward, init_backbone,
                    init_head, parameters, sgd_step)
from .numerics import make_rng
from .stats import ClassStats, ConfusionRates, update_confusion, update_stats
from .strength import StrengthMatrix, direct_strengths

METHODS = ("ce", "la", "isda", "risda", "icda", "meta_icda")
STAT_METHODS = ("isda", "risda", "icda", "meta_icda")


@dataclass
class LossSettings:
    method: str = "icda"
    icda: L.IcdaConfig = field(default_factory=L.IcdaConfig)
    alpha_r: float = 0.5
    beta_r: float = 0.5
    confusion_decay: float = 0.1
    fixed_alpha: float | None = None  # overrides the per-sample scalar strength


class BatchSampler:
    """Epoch-wise shuffled mini-batches from a dedicated stream."""

    def __init__(self, n: int, batch_size: int, rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = make_rng(rng)
        self._perm = np.zeros(0, np.int64)
        self._pos = 0
        self.epoch = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self._perm.size:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
            self.epoch += 1
        out = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


@dataclass
class RunState:
    backbone: Backbone
    head: LinearHead
    stats: ClassStats
    rates: ConfusionRates
    train_prior: np.ndarray
    sgd_state: dict = field(default_factory=dict)
    iteration: int = 0

    @classmethod
    def create(cls, train: Dataset, widths, rng, diagonal: bool = False,
               relu_features: bool = False) -> "RunState":
        r_bb, r_head = make_rng(rng).spawn(2)
        bb = init_backbone(train.dim, widths, r_bb, relu_output=relu_features)
        head = init_head(bb.out_dim, train.num_classes, r_head)
        counts = train.class_counts().astype(np.float64)
        return cls(bb, head, ClassStats.zeros(train.num_classes, bb.out_dim, diagonal),
                   ConfusionRates.zeros(train.num_classes), counts / counts.sum())

    def params(self) -> dict[str, np.ndarray]:
        return parameters(self.backbone, self.head)


def strengths_for(h, y, head, settings: LossSettings) -> StrengthMatrix:
    cfg = settings.icda
    s = direct_strengths(h, head, y, noisy=cfg.noise_mode, tau=cfg.tau)
    if settings.fixed_alpha is not None:
        s.alpha_scalar = np.full(y.size, float(settings.fixed_alpha))
    return s


def compute_loss(state: RunState, h, y, settings: LossSettings, t: int, T: int,
                 strengths: StrengthMatrix | None = None) -> L.LossResult:
    """Loss and head/feature gradients for one batch of features."""
    m = settings.method
    head = state.head
    if m == "ce":
        return L._perturbed_ce(h, y, head, None, 0.0, None, None)
    if m == "la":
        return L._perturbed_ce(h, y, head, L.la_shift(state.train_prior, y), 0.0, None, None)
    lam = L.lambda_at(t, T, settings.icda.lambda0)
    if m == "isda":
        return L.isda_loss(h, y, head, state.stats, lam)
    if m == "risda":
        return L.risda_loss(h, y, head, state.stats, state.rates, settings.alpha_r, settings.beta_r)
    if strengths is None:
        strengths = strengths_for(h, y, head, settings)
    terms = L.icda_perturbations(h, y, head, state.stats, strengths, lam, settings.icda.beta,
                                 state.train_prior)
    return L.icda_loss_from_terms(h, y, head, state.stats, strengths, terms)


def apply_update(state: RunState, cache, res: L.LossResult, sgd: SgdConfig) -> None:
    grads = {"head.w": res.d_w, "head.b": res.d_b}
    grads.update(backward_backbone(cache, res.d_features))
    sgd_step(state.params(), grads, state.sgd_state, sgd, state.iteration, backbone=state.backbone)


def train_step(state: RunState, x, y, settings: LossSettings, sgd: SgdConfig, T: int) -> L.LossResult:
    """One SGD iteration: forward, statistics update, loss, backward, step."""
    t = state.iteration + 1
    h, logits, cache = forward(state.backbone, state.head, x)
    if settings.method in STAT_METHODS:
        update_stats(state.stats, h, y)
    res = compute_loss(state, h, y, settings, t, T)
    apply_update(state, cache, res, sgd)
    if settings.method == "risda":
        state.rates = update_confusion(state.rates, np.argmax(logits, axis=1), y,
                                       settings.confusion_decay)
    state.iteration = t
    return res
