"""Post-training diagnostic bundle: regularizer decompositions, Taylor tables, geometry."""

from __future__ import annotations

import numpy as np

from .. import diagnostics as dg
from ..engine import RunState
from ..model import forward
from ..stats import ClassStats, update_stats
from ..strength import direct_strengths
from .config import ExperimentConfig
from .training import run_seed

TAYLOR_EPS = (1e-2, 5e-3, 2.5e-3, 1.25e-3)
PROBE_SIZE = 256


def regularizer_bundle(state: RunState, stats: ClassStats, features, labels, cfg: ExperimentConfig,
                       lam: float) -> dict:
    """Regularizer components and Taylor remainder tables of all four methods on one batch."""
    h, logits, _ = forward(state.backbone, state.head, features)
    s = dg.BatchState(h, labels, state.head, stats, state.train_prior,
                      direct_strengths(h, state.head, labels, cfg.loss.noise_mode, cfg.loss.tau),
                      state.rates, lam, cfg.loss.beta, cfg.loss.alpha_r, cfg.loss.beta_r)
    out = {}
    for method in dg.METHODS:
        rep = dg.regularizer(method, s)
        du = dg.perturbation_vector(method, s)
        out[method] = {**rep.to_dict(), "dropped_constant": dg.dropped_constant(method, s),
                       "taylor": dg.taylor_check(logits, labels, du, TAYLOR_EPS)}
    return out


def diag(cfg: ExperimentConfig, seed: int) -> dict:
    """Train one seed, then evaluate diagnostics with statistics recomputed from the final
    features of the whole training split (so every method, CE included, gets geometry)."""
    m = run_seed(cfg, seed)
    state: RunState = m["_state"]
    train = m["_splits"].train
    h, _, _ = forward(state.backbone, state.head, train.features)
    stats = update_stats(ClassStats.zeros(train.num_classes, h.shape[1], cfg.loss.diagonal), h, train.labels)
    # evenly spaced rows: the training split is sorted by class after subsampling
    probe = np.unique(np.linspace(0, len(train) - 1, min(PROBE_SIZE, len(train))).astype(np.int64))
    bundle = {"seed": seed, "method": cfg.loss.method, **m["_diagnostics"]}
    bundle["regularizers"] = regularizer_bundle(state, stats, train.features[probe], train.labels[probe],
                                                cfg, cfg.loss.lambda0)
    bundle["geometry"] = dg.head_geometry(state.head, stats)
    return bundle
