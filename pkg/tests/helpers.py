"""Shared random-instance builders and a plain central-difference oracle."""

import numpy as np

from icda.model import LinearHead
from icda.stats import ClassStats, ConfusionRates
from icda.strength import direct_strengths


def make_instance(seed, N=8, C=4, H=6, diagonal=False):
    r = np.random.default_rng(seed)
    y = r.permutation(np.concatenate([np.arange(C), r.integers(0, C, N - C)]))
    head = LinearHead(r.normal(0, 0.5, (C, H)), r.normal(0, 0.1, C))
    h = r.normal(size=(N, H))
    mean = r.normal(size=(C, H))
    if diagonal:
        cov = 0.3 * r.uniform(0.1, 1.0, (C, H))
    else:
        A = r.normal(size=(C, H, H))
        cov = 0.3 * A @ np.swapaxes(A, 1, 2) / H
    stats = ClassStats(mean, cov, np.full(C, 10.0))
    pi = r.dirichlet(np.ones(C))
    eps = r.uniform(0, 0.3, (C, C))
    np.fill_diagonal(eps, 0)
    return dict(h=h, y=y, head=head, stats=stats, pi=pi, strengths=direct_strengths(h, head, y),
                rates=ConfusionRates(eps), lam=float(r.uniform(0.1, 1)), beta=float(r.uniform(0, 0.5)))


def central_diff(f, x, step=1e-5):
    g = np.zeros_like(x)
    flat, out = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        up = f()
        flat[k] = old - step
        down = f()
        flat[k] = old
        out[k] = (up - down) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
