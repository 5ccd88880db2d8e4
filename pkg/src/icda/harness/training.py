"""End-to-end training runs and their metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import datasets as ds
from ..diagnostics import head_geometry, margin_distribution, write_margin_csv
from ..losses import lambda_at
from ..engine import STAT_METHODS, BatchSampler, LossSettings, RunState, train_step
from ..meta import MetaState, run_meta_icda
from ..model import forward, save_checkpoint
from ..numerics import make_rng, softmax
from ..strength import StrengthNet
from .config import ConfigError, ExperimentConfig

TAIL_CLASSES = 3
SCALAR_KEYS = ("test_accuracy", "tail_accuracy", "worst_group_accuracy", "train_loss", "test_loss",
               "small_margin_fraction")


@dataclass
class Splits:
    train: ds.Dataset
    test: ds.Dataset
    meta: ds.Dataset | None = None


def build_data(cfg: ExperimentConfig, rng) -> Splits:
    """Train/test (and optional metadata) splits, a pure function of (config, rng)."""
    d = cfg.dataset
    r_gen, r_train, r_test, r_imb, r_noise, r_meta = make_rng(rng).spawn(6)
    clean_pool = None
    if d.kind == "spurious":
        train, test = ds.make_spurious(d.d_signal, d.d_spur, d.n_train, r_gen, d.train_group_ratio,
                                       d.test_group_ratio, d.label_flip, d.signal_strength,
                                       d.spur_strength, n_test=d.n_test)
    else:
        means = ds.mixture_means(d.num_classes, d.dim, d.separation, r_gen)
        train = ds.sample_mixture(means, d.n_per_class, r_train, d.scale)
        test = ds.sample_mixture(means, d.n_test_per_class, r_test, d.scale, "test")
        if d.noise_rate > 0 and d.meta_per_class > 0:
            # noisy runs take their metadata from a clean pool; otherwise it is carved from train
            clean_pool = ds.sample_mixture(means, d.meta_per_class, r_meta, d.scale, "meta")
        if d.imbalance_ratio > 1.0:
            train = ds.apply_imbalance(train, ds.ImbalanceProfile(d.imbalance_ratio), r_imb)
    meta = None
    if d.meta_per_class > 0:
        if clean_pool is not None:
            meta = clean_pool
        else:
            train, meta = ds.split_meta(train, d.meta_per_class, r_meta)
    if d.noise_rate > 0:
        noisy = ds.inject_noise(train.labels, ds.NoiseSpec(d.noise_kind, d.noise_rate),
                                train.num_classes, r_noise)
        train = ds.Dataset(train.features, noisy, train.num_classes, train.groups, "train")
    return Splits(train, test, meta)


def evaluate(state: RunState, data: ds.Dataset, tail: np.ndarray | None = None) -> dict:
    h, logits, _ = forward(state.backbone, state.head, data.features)
    y = data.labels
    pred = np.argmax(logits, axis=1)
    correct = pred == y
    C = data.num_classes
    per_class = [float(correct[y == c].mean()) if np.any(y == c) else None for c in range(C)]
    q = softmax(logits)
    loss = float(np.mean(-np.log(np.maximum(q[np.arange(y.size), y], 1e-300))))
    out = {"accuracy": float(correct.mean()), "loss": loss, "per_class_accuracy": per_class}
    if tail is not None:
        out["tail_accuracy"] = float(np.mean([per_class[c] for c in tail if per_class[c] is not None]))
    if data.groups is not None:
        groups = {int(g): float(correct[data.groups == g].mean()) for g in np.unique(data.groups)}
        out["group_accuracy"] = groups
        out["worst_group_accuracy"] = min(groups.values())
    out["margins"] = margin_distribution(logits, y)
    return out


def _settings(cfg: ExperimentConfig) -> LossSettings:
    l = cfg.loss
    return LossSettings(l.method, l.icda(), l.alpha_r, l.beta_r, l.confusion_decay, l.fixed_alpha)


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None) -> dict:
    """Train one seed; returns the per-seed metrics dict (and writes artifacts)."""
    cfg.validate()
    root = make_rng(seed)
    r_data, r_init, r_batch, r_meta = root.spawn(4)
    splits = build_data(cfg, r_data)
    train, test = splits.train, splits.test
    settings = _settings(cfg)
    sgd = cfg.sgd.build()
    T = cfg.run.iterations
    state = RunState.create(train, cfg.model.widths, r_init, cfg.loss.diagonal, cfg.model.relu_features)
    counts = train.class_counts()
    tail = np.argsort(counts, kind="stable")[:TAIL_CLASSES]
    iters_per_epoch = max(1, len(train) // min(cfg.run.batch_size, len(train)))
    eval_every = cfg.run.eval_every or iters_per_epoch
    epochs: list[dict] = []
    trace: list[dict] = []

    def log_epoch():
        tr = evaluate(state, train)
        te = evaluate(state, test, tail)
        epochs.append({"iteration": state.iteration, "train_loss": tr["loss"], "test_loss": te["loss"],
                       "train_accuracy": tr["accuracy"], "test_accuracy": te["accuracy"]})

    if settings.method == "meta_icda":
        if splits.meta is None or len(splits.meta) == 0:
            raise ConfigError("meta_icda needs a non-empty metadata split")
        net = StrengthNet.init(r_meta, cfg.meta.hidden, zero=cfg.meta.omega_init == "zero")
        mstate = MetaState(net, cfg.meta.eta2, cfg.meta.meta_batch_size)

        def hook(st, _sampler):
            if st.iteration % eval_every == 0:
                log_epoch()

        rows = run_meta_icda(state, mstate, train, splits.meta, settings, sgd, T,
                             cfg.run.batch_size, r_batch, on_iteration=hook)
        for r in rows:
            trace.append({"iteration": r.iteration, "loss": r.train_loss, "meta_loss": r.meta_loss,
                          "mean_alpha": r.mean_alpha, "lambda": r.lam})
    else:
        sampler = BatchSampler(len(train), cfg.run.batch_size, r_batch)
        for _ in range(T):
            idx = sampler.next()
            x, y = train.features[idx], train.labels[idx]
            res = train_step(state, x, y, settings, sgd, T)
            row = {"iteration": state.iteration, "loss": res.loss, "meta_loss": None,
                   "mean_alpha": None, "lambda": None}
            if settings.method in ("icda", "isda"):
                row["lambda"] = lambda_at(state.iteration, T, settings.icda.lambda0)
            trace.append(row)
            if state.iteration % eval_every == 0:
                log_epoch()
    final = evaluate(state, test, tail)
    final_train = evaluate(state, train)
    metrics = {
        "seed": seed,
        "method": settings.method,
        "iterations": state.iteration,
        "test_accuracy": final["accuracy"],
        "tail_accuracy": final.get("tail_accuracy"),
        "worst_group_accuracy": final.get("worst_group_accuracy"),
        "group_accuracy": final.get("group_accuracy"),
        "per_class_accuracy": final["per_class_accuracy"],
        "train_loss": final_train["loss"],
        "test_loss": final["loss"],
        "small_margin_fraction": final["margins"]["small_margin_fraction"],
        "tail_classes": [int(c) for c in tail],
        "epochs": epochs,
    }
    diagnostics = {
        "margin_histogram": {"bin_left": final["margins"]["bin_left"], "count": final["margins"]["count"]},
        "mean_margin": final["margins"]["mean_margin"],
    }
    if settings.method in STAT_METHODS and state.stats.count.sum() > 0:
        diagnostics["geometry"] = head_geometry(state.head, state.stats)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(out_dir / "metrics.json", metrics)
        _write_json(out_dir / "diagnostics.json", diagnostics)
        _write_trace(out_dir / "trace.csv", trace)
        write_margin_csv(final["margins"], out_dir / "margins.csv")
        save_checkpoint(out_dir / "checkpoint.bin", state.params())
        state.stats.dump(out_dir / "stats.json")
    metrics["_state"] = state
    metrics["_splits"] = splits
    metrics["_diagnostics"] = diagnostics
    metrics["_trace"] = trace
    return metrics


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _write_trace(path: Path, rows: list[dict]) -> None:
    keys = ["iteration", "loss", "meta_loss", "mean_alpha", "lambda"]
    if rows and "seed" in rows[0]:
        keys = ["seed"] + keys
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for r in rows:
            w.writerow(["" if r[k] is None else repr(r[k]) for k in keys])


def aggregate(per_seed: list[dict]) -> dict:
    out = {}
    for k in SCALAR_KEYS:
        vals = [m[k] for m in per_seed if m.get(k) is not None]
        if vals:
            out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        else:
            out[k] = None
    return out


def public(metrics: dict) -> dict:
    return {k: v for k, v in metrics.items() if not k.startswith("_")}


def run(cfg: ExperimentConfig, out: str | Path | None = None) -> dict:
    """Train every configured seed and write per-seed plus aggregate reports."""
    cfg.validate()
    out = Path(out or cfg.run.out) if (out or cfg.run.out) else None
    per_seed, diags, traces = [], {}, []
    for seed in cfg.run.seeds:
        m = run_seed(cfg, seed, None if out is None else out / f"seed_{seed}")
        per_seed.append(public(m))
        diags[str(seed)] = m["_diagnostics"]
        traces.extend({"seed": seed, **r} for r in m["_trace"])
    config = cfg.to_dict()
    config["run"].pop("out")  # where results go is not part of the experiment
    report = {"method": cfg.loss.method, "config": config, "seeds": per_seed,
              "aggregate": aggregate(per_seed)}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "metrics.json", report)
        _write_json(out / "diagnostics.json", diags)
        _write_trace(out / "trace.csv", traces)
    return report
