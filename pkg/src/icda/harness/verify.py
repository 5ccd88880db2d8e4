"""Property suites run on freshly generated random instances.

Each suite returns a summary ``{"families": {name: {...}}, "passed": bool}``
where every family records how many instances it ran, how many failed, the
worst-case error and the tolerance it was held to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diagnostics as dg
from .. import losses as L
from ..meta import InnerProblem, meta_gradients
from ..model import LinearHead
from ..numerics import make_rng
from ..oracle import mc_expected_loss, surrogate_upper_bound
from ..stats import ClassStats, ConfusionRates, batch_moments, update_stats
from ..strength import StrengthMatrix, direct_strengths

SUITES = ("gradients", "bound", "reductions", "stats", "taylor")
LAMBDA_GRID = (0.1, 0.25, 0.5, 0.75, 1.0)
GRAD_TOL = 1e-5
META_TOL = 1e-4
IDENTITY_TOL = 1e-12
STREAM_TOL = 1e-10
MAPPED_TOL = 1e-8


@dataclass
class Instance:
    features: np.ndarray
    labels: np.ndarray
    head: LinearHead
    stats: ClassStats
    pi: np.ndarray
    strengths: StrengthMatrix
    rates: ConfusionRates
    lam: float
    beta: float


def random_stats(C: int, H: int, rng, diagonal: bool = False, scale: float = 0.3) -> ClassStats:
    rng = make_rng(rng)
    mean = rng.normal(0.0, 1.0, (C, H))
    if diagonal:
        cov = scale * rng.uniform(0.1, 1.0, (C, H))
    else:
        A = rng.normal(0.0, 1.0, (C, H, H))
        cov = scale * np.matmul(A, np.swapaxes(A, 1, 2)) / H
    return ClassStats(mean, cov, rng.integers(5, 50, C).astype(np.float64))


def random_instance(rng, N: int = 8, C: int = 4, H: int = 6, diagonal: bool = False) -> Instance:
    """A batch with every class present, populated statistics and strengths."""
    rng = make_rng(rng)
    labels = np.concatenate([np.arange(C), rng.integers(0, C, max(N - C, 0))])[:N]
    labels = rng.permutation(labels)
    head = LinearHead(rng.normal(0.0, 0.5, (C, H)), rng.normal(0.0, 0.1, C))
    features = rng.normal(0.0, 1.0, (N, H))
    stats = random_stats(C, H, rng, diagonal)
    pi = rng.dirichlet(np.ones(C))
    eps = rng.uniform(0.0, 0.3, (C, C))
    np.fill_diagonal(eps, 0.0)
    strengths = direct_strengths(features, head, labels)
    return Instance(features, labels, head, stats, pi, strengths, ConfusionRates(eps),
                    float(rng.uniform(0.1, 1.0)), float(rng.uniform(0.0, 0.5)))


def loss_for(method: str, inst: Instance, features=None, head=None) -> L.LossResult:
    """Evaluate one method's loss on an instance; strengths stay fixed."""
    h = inst.features if features is None else features
    hd = inst.head if head is None else head
    y = inst.labels
    if method == "ce":
        return L._perturbed_ce(h, y, hd, None, 0.0, None, None)
    if method == "la":
        return _la_full(h, y, hd, inst.pi)
    if method == "isda":
        return L.isda_loss(h, y, hd, inst.stats, inst.lam)
    if method == "risda":
        return L.risda_loss(h, y, hd, inst.stats, inst.rates, 0.5, 0.5)
    if method == "icda":
        terms = L.icda_perturbations(h, y, hd, inst.stats, inst.strengths, inst.lam, inst.beta, inst.pi)
        return L.icda_loss_from_terms(h, y, hd, inst.stats, inst.strengths, terms)
    raise ValueError(f"unknown method {method!r}")


def _la_full(h, y, head, pi) -> L.LossResult:
    return L._perturbed_ce(h, y, head, L.la_shift(pi, y), 0.0, None, None)


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _central(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        up = f()
        flat[k] = old - step
        down = f()
        flat[k] = old
        gf[k] = (up - down) / (2 * step)
    return g


def gradient_errors(method: str, inst: Instance) -> dict[str, float]:
    """Relative errors of the analytic (w, b, features) gradients vs central differences."""
    head = inst.head.copy()
    h = inst.features.copy()
    res = loss_for(method, inst, h, head)

    def f():
        return loss_for(method, inst, h, head).loss

    return {"w": _rel(res.d_w, _central(f, head.w)), "b": _rel(res.d_b, _central(f, head.b)),
            "features": _rel(res.d_features, _central(f, h))}


class _Family:
    def __init__(self, tol: float, floor: float = 0.0):
        self.tol = tol
        self.count = 0
        self.failures = 0
        self.worst = floor

    def add(self, err: float, ok: bool | None = None) -> None:
        self.count += 1
        ok = (err <= self.tol) if ok is None else ok
        self.failures += 0 if ok else 1
        if np.isnan(err) or err > self.worst:
            self.worst = float(err)

    def to_dict(self) -> dict:
        return {"count": self.count, "failures": self.failures, "worst_error": self.worst,
                "tolerance": self.tol, "passed": self.failures == 0 and self.count > 0}


def _summary(suite: str, fams: dict[str, _Family], extra: dict | None = None) -> dict:
    out = {"suite": suite, "families": {k: v.to_dict() for k, v in fams.items()}}
    out["passed"] = all(f["passed"] for f in out["families"].values())
    if extra:
        out.update(extra)
    return out


# ---------------------------------------------------------------- gradients
def meta_fd_errors(rng, diagonal: bool, directions: int = 3, step: float = 1e-5) -> dict[str, float]:
    """Directional central differences of the meta loss w.r.t. alpha_i, mu and Sigma."""
    rng = make_rng(rng)
    inst = random_instance(rng, N=6, C=3, H=4, diagonal=diagonal)
    a0 = rng.uniform(0.0, 1.0, inst.labels.size)
    hm = rng.normal(0.0, 1.0, (5, 4))
    ym = rng.integers(0, 3, 5)
    eta1 = 0.5

    def meta_loss(alpha_scalar, mean, cov):
        st = ClassStats(mean, cov, inst.stats.count)
        prob = InnerProblem(inst.features, inst.labels, inst.head, st,
                            StrengthMatrix(inst.strengths.alpha, alpha_scalar), inst.lam, inst.beta, inst.pi)
        return meta_gradients(prob, eta1, hm, ym)

    g = meta_loss(a0, inst.stats.mean, inst.stats.cov)
    errs = {"alpha": 0.0, "mean": 0.0, "cov": 0.0}
    for _ in range(directions):
        va = rng.normal(size=a0.shape)
        vm = rng.normal(size=inst.stats.mean.shape)
        vc = rng.normal(size=inst.stats.cov.shape)
        if not diagonal:
            vc = 0.5 * (vc + np.swapaxes(vc, 1, 2))
        cases = {
            "alpha": (lambda t: meta_loss(a0 + t * va, inst.stats.mean, inst.stats.cov), np.sum(g.alpha * va)),
            "mean": (lambda t: meta_loss(a0, inst.stats.mean + t * vm, inst.stats.cov), np.sum(g.mean * vm)),
            "cov": (lambda t: meta_loss(a0, inst.stats.mean, inst.stats.cov + t * vc), np.sum(g.cov * vc)),
        }
        for name, (f, analytic) in cases.items():
            fd = (f(step).meta_loss - f(-step).meta_loss) / (2 * step)
            errs[name] = max(errs[name], abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-10))
    return errs


def suite_gradients(seed: int = 0, instances: int = 100, meta_instances: int = 10) -> dict:
    rng = make_rng(seed)
    fams: dict[str, _Family] = {}
    for diagonal in (False, True):
        mode = "diag" if diagonal else "full"
        for r in rng.spawn(instances):
            inst = random_instance(r, N=8, C=4, H=6, diagonal=diagonal)
            for method in ("ce", "la", "isda", "risda", "icda"):
                fam = fams.setdefault(f"{method}/{mode}", _Family(GRAD_TOL))
                fam.add(max(gradient_errors(method, inst).values()))
        fam = fams.setdefault(f"meta/{mode}", _Family(META_TOL))
        for r in rng.spawn(meta_instances):
            fam.add(max(meta_fd_errors(r, diagonal).values()))
    return _summary("gradients", fams)


# ---------------------------------------------------------------- bound
def bound_instance(rng, N: int = 3, C: int = 4, H: int = 5):
    """Small batch with strictly positive strengths towards every non-target class."""
    rng = make_rng(rng)
    inst = random_instance(rng, N=N, C=C, H=H)
    alpha = rng.uniform(0.05, 1.0, (N, C))
    alpha[np.arange(N), inst.labels] = 0.0
    return inst, alpha


def suite_bound(seed: int = 0, instances: int = 25, M: int = 100_000) -> dict:
    rng = make_rng(seed)
    upper = _Family(3.0, floor=-np.inf)  # worst (mc - bound) / se, must not exceed 3
    equal = _Family(1e-10)
    records = []
    for k, r in enumerate(rng.spawn(instances)):
        r_inst, r_mc = r.spawn(2)
        inst, alpha = bound_instance(r_inst)
        args = (inst.features, inst.labels, inst.head, inst.stats, alpha, inst.pi)
        est0, _ = mc_expected_loss(*args, 0.0, 1, r_mc)
        b0 = surrogate_upper_bound(*args, 0.0)
        equal.add(abs(est0 - b0))
        for lam, r_lam in zip(LAMBDA_GRID, r_mc.spawn(len(LAMBDA_GRID))):
            est, se = mc_expected_loss(*args, lam, M, r_lam)
            bound = surrogate_upper_bound(*args, lam)
            z = (est - bound) / se if se > 0 else (np.inf if est > bound else -np.inf)
            upper.add(float(z), ok=bool(est <= bound + 3.0 * se))
            records.append({"instance": k, "lam": lam, "M": M, "mc_estimate": est, "se": se,
                            "bound": bound, "pass": bool(est <= bound + 3.0 * se)})
    return _summary("bound", {"mc_within_3se": upper, "lambda0_equality": equal}, {"records": records})


# ---------------------------------------------------------------- reductions
def reduction_errors(inst: Instance) -> dict[str, float]:
    h, y, head, stats = inst.features, inst.labels, inst.head, inst.stats
    C = head.w.shape[0]
    out = {}
    # ICDA(lambda = beta = 0) == LA
    icda = L.icda_loss(h, y, head, stats, inst.strengths, L.IcdaConfig(0.0, 0.0), 1, 1, inst.pi)
    la = _la_full(h, y, head, inst.pi)
    out["icda_to_la"] = float(np.max(np.abs(icda.per_sample - la.per_sample)))
    # ICDA(alpha_hat = 0, beta = 0, uniform pi) == ISDA
    zero = StrengthMatrix(np.zeros_like(inst.strengths.alpha), np.zeros(y.size))
    uni = np.full(C, 1.0 / C)
    terms = L.icda_perturbations(h, y, head, stats, zero, inst.lam, 0.0, uni)
    icda0 = L.icda_loss_from_terms(h, y, head, stats, zero, terms)
    isda = L.isda_loss(h, y, head, stats, inst.lam)
    out["icda_to_isda"] = float(np.max(np.abs(icda0.per_sample - isda.per_sample)))
    # RISDA(eps = 0, alpha_r = 0, beta_r = lambda / 2) == ISDA
    risda = L.risda_loss(h, y, head, stats, ConfusionRates.zeros(C), 0.0, inst.lam / 2)
    out["risda_to_isda"] = float(np.max(np.abs(risda.per_sample - isda.per_sample)))
    # LA(uniform pi) == CE
    ce = L._perturbed_ce(h, y, head, None, 0.0, None, None)
    out["la_to_ce"] = float(np.max(np.abs(_la_full(h, y, head, uni).per_sample - ce.per_sample)))
    return out


def suite_reductions(seed: int = 0, instances: int = 100) -> dict:
    rng = make_rng(seed)
    fams = {k: _Family(IDENTITY_TOL) for k in ("icda_to_la", "icda_to_isda", "risda_to_isda", "la_to_ce")}
    for k, r in enumerate(rng.spawn(instances)):
        inst = random_instance(r, diagonal=bool(k % 2))
        for name, err in reduction_errors(inst).items():
            fams[name].add(err)
    return _summary("reductions", fams)


# ---------------------------------------------------------------- stats
def streaming_error(rng, C: int = 3, H: int = 4, n: int = 60, parts: int = 5, diagonal: bool = False) -> float:
    """Max deviation between streamed and pooled per-class moments over a random partition."""
    rng = make_rng(rng)
    x = rng.normal(0.0, 1.0, (n, H)) * rng.uniform(0.5, 3.0, H) + rng.normal(0.0, 2.0, H)
    y = rng.integers(0, C, n)
    y[:C] = np.arange(C)
    cuts = np.sort(rng.choice(np.arange(1, n), size=parts - 1, replace=False))
    order = rng.permutation(n)
    st = ClassStats.zeros(C, H, diagonal)
    for chunk in np.split(order, cuts):
        update_stats(st, x[chunk], y[chunk])
    err = 0.0
    for c in range(C):
        m, cov = batch_moments(x[y == c], diagonal)
        err = max(err, float(np.max(np.abs(st.mean[c] - m))), float(np.max(np.abs(st.cov[c] - cov))))
    return err


def mapped_variance_error(rng, H: int = 5, n: int = 200) -> float:
    rng = make_rng(rng)
    cloud = rng.normal(0.0, 1.0, (n, H)) @ rng.normal(0.0, 1.0, (H, H))
    head = LinearHead(rng.normal(0.0, 1.0, (3, H)), np.zeros(3))
    _, cov = batch_moments(cloud)
    direct = dg.mapped_variance(head, 1, 0, cov)
    proj = cloud @ (head.w[1] - head.w[0])
    return abs(direct - float(proj.var())) / max(1.0, abs(direct))


def suite_stats(seed: int = 0, trials: int = 100) -> dict:
    rng = make_rng(seed)
    fams = {"stream_full": _Family(STREAM_TOL), "stream_diag": _Family(STREAM_TOL),
            "mapped_variance": _Family(MAPPED_TOL)}
    for r in rng.spawn(trials):
        a, b, c = r.spawn(3)
        fams["stream_full"].add(streaming_error(a))
        fams["stream_diag"].add(streaming_error(b, diagonal=True))
        fams["mapped_variance"].add(mapped_variance_error(c))
    return _summary("stats", fams)


# ---------------------------------------------------------------- taylor
TAYLOR_EPS = tuple(1e-2 / 2**k for k in range(8))  # 1e-2 down past 1e-4


def batch_state(inst: Instance) -> dg.BatchState:
    return dg.BatchState(inst.features, inst.labels, inst.head, inst.stats, inst.pi, inst.strengths,
                         inst.rates, inst.lam, inst.beta)


def taylor_errors(method: str, inst: Instance) -> dict[str, float]:
    """Worst deviation of the remainder ratios from 1/4, and the R-consistency gap."""
    s = batch_state(inst)
    u = s.logits
    du = dg.perturbation_vector(method, s)
    rows = dg.taylor_check(u, inst.labels, du, TAYLOR_EPS)
    ratio_dev = max(abs(r["ratio"] - 0.25) for r in rows[1:])
    grad = np.exp(u - u.max(axis=1, keepdims=True))
    grad /= grad.sum(axis=1, keepdims=True)
    grad[np.arange(inst.labels.size), inst.labels] -= 1.0
    rep = dg.regularizer(method, s)
    linear = float(np.sum(grad * du))
    r_gap = abs(rep.total + dg.dropped_constant(method, s) - linear) / max(1.0, abs(linear))
    return {"ratio": ratio_dev, "regularizer": r_gap}


def icda_la_component_gap(inst: Instance) -> float:
    s = batch_state(inst)
    s.lam, s.beta = 0.0, 0.0
    ri = dg.regularizer("icda", s)
    rl = dg.regularizer("la", s)
    gap = max(abs(ri.components[k] - rl.components[k]) for k in dg.COMPONENTS)
    return max(gap, float(np.max(np.abs(ri.per_sample - rl.per_sample))))


def suite_taylor(seed: int = 0, instances: int = 25) -> dict:
    rng = make_rng(seed)
    fams: dict[str, _Family] = {}
    for k, r in enumerate(rng.spawn(instances)):
        inst = random_instance(r, diagonal=bool(k % 2))
        for method in dg.METHODS:
            errs = taylor_errors(method, inst)
            fams.setdefault(f"{method}/ratio", _Family(0.05)).add(errs["ratio"])
            fams.setdefault(f"{method}/regularizer", _Family(1e-10)).add(errs["regularizer"])
        fams.setdefault("icda_equals_la_components", _Family(IDENTITY_TOL)).add(icda_la_component_gap(inst))
    return _summary("taylor", fams)


RUNNERS = {"gradients": suite_gradients, "bound": suite_bound, "reductions": suite_reductions,
           "stats": suite_stats, "taylor": suite_taylor}


def verify(suite: str = "all", seed: int = 0) -> dict:
    """Run one suite (or ``all``); the summary's ``passed`` flag drives the exit status."""
    names = SUITES if suite == "all" else (suite,)
    for n in names:
        if n not in RUNNERS:
            raise ValueError(f"unknown suite {suite!r}; expected one of {', '.join(SUITES)} or all")
    results = {n: RUNNERS[n](seed) for n in names}
    return {"suite": suite, "seed": seed, "passed": all(r["passed"] for r in results.values()),
            "results": results}
