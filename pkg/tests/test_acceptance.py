"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line (shown even
under output capture) and then asserts the same condition.
"""

import functools
import time

import numpy as np
import pytest

from icda.cli import main
from icda.harness.config import ExperimentConfig
from icda.harness.training import run_seed
from icda.harness.verify import verify
from icda.model import forward
from icda.strength import alpha_scalar_noisy, target_cosine

SEEDS = (0, 1, 2, 3, 4)

pytestmark = pytest.mark.acceptance


@functools.lru_cache(maxsize=None)
def suite(name):
    t0 = time.perf_counter()
    res = verify(name)["results"][name]
    return res, time.perf_counter() - t0


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")


def config(method, **over):
    cfg = ExperimentConfig()
    cfg.loss.method = method
    for key, value in over.items():
        section, name = key.split("__")
        setattr(getattr(cfg, section), name, value)
    return cfg.validate()


def mean_over_seeds(cfg, key, seeds=SEEDS):
    runs = [run_seed(cfg, s) for s in seeds]
    return float(np.mean([r[key] for r in runs])), runs


def suite_line(res):
    return ", ".join(f"{k}: worst={v['worst_error']:.2e} tol={v['tolerance']:.0e}" for k, v in res["families"].items())


def test_criterion_1_gradients(capsys):
    res, dt = suite("gradients")
    plain = {k: v for k, v in res["families"].items() if not k.startswith("meta")}
    ok = all(v["passed"] for v in plain.values()) and dt < 30
    worst = max(v["worst_error"] for v in plain.values())
    report(capsys, 1, ok, f"worst rel err {worst:.2e} < 1e-5 over {len(plain)} method/mode families, {dt:.1f}s < 30s")
    assert ok


def test_criterion_2_bound(capsys):
    res, dt = suite("bound")
    fam = res["families"]
    ok = res["passed"] and dt < 120
    report(capsys, 2, ok, f"max (MC - bound)/SE = {fam['mc_within_3se']['worst_error']:.2f} <= 3, "
           f"lambda=0 gap {fam['lambda0_equality']['worst_error']:.1e} <= 1e-10, {dt:.1f}s < 120s")
    assert ok


def test_criterion_3_reductions(capsys):
    res, _ = suite("reductions")
    la = run_seed(config("la", run__iterations=50, dataset__imbalance_ratio=100.0), 0)
    icda = run_seed(config("icda", run__iterations=50, dataset__imbalance_ratio=100.0,
                           loss__lambda0=0.0, loss__beta=0.0), 0)
    same = all(np.array_equal(v, icda["_state"].params()[k]) for k, v in la["_state"].params().items())
    same = same and [r["loss"] for r in la["_trace"]] == [r["loss"] for r in icda["_trace"]]
    ok = res["passed"] and same
    report(capsys, 3, ok, f"{suite_line(res)}; 50-iteration LA trajectory bitwise equal: {same}")
    assert ok


def test_criterion_4_streaming(capsys):
    res, _ = suite("stats")
    fams = {k: res["families"][k] for k in ("stream_full", "stream_diag")}
    ok = all(v["passed"] for v in fams.values())
    report(capsys, 4, ok, ", ".join(f"{k}: worst={v['worst_error']:.1e} <= 1e-10" for k, v in fams.items()))
    assert ok


def test_criterion_5_taylor(capsys):
    res, _ = suite("taylor")
    ok = res["passed"]
    ratio = max(v["worst_error"] for k, v in res["families"].items() if k.endswith("/ratio"))
    gap = res["families"]["icda_equals_la_components"]["worst_error"]
    report(capsys, 5, ok, f"max |ratio - 0.25| = {ratio:.3f} <= 0.05 for la/isda/risda/icda; "
           f"R_ICDA(0,0) vs R_LA gap {gap:.1e}")
    assert ok


def test_criterion_6_mapped_variance(capsys):
    fam = suite("stats")[0]["families"]["mapped_variance"]
    ok = fam["passed"]
    report(capsys, 6, ok, f"worst deviation {fam['worst_error']:.1e} <= 1e-8 over {fam['count']} clouds")
    assert ok


def test_criterion_7_long_tail(capsys):
    t0 = time.perf_counter()
    ce_tail, ce_runs = mean_over_seeds(config("ce", dataset__imbalance_ratio=100.0), "tail_accuracy")
    ic_tail, ic_runs = mean_over_seeds(config("icda", dataset__imbalance_ratio=100.0), "tail_accuracy")
    dt = time.perf_counter() - t0
    ce_acc = np.mean([r["test_accuracy"] for r in ce_runs])
    ic_acc = np.mean([r["test_accuracy"] for r in ic_runs])
    ok = ic_tail - ce_tail >= 0.05 and ic_acc >= ce_acc - 0.01 and dt < 120
    report(capsys, 7, ok, f"tail acc CE {ce_tail:.3f} vs ICDA {ic_tail:.3f} (+{100 * (ic_tail - ce_tail):.1f} pts >= 5); "
           f"overall CE {ce_acc:.3f} vs ICDA {ic_acc:.3f}; {dt:.1f}s < 120s")
    assert ok


def test_criterion_8_spurious(capsys):
    t0 = time.perf_counter()
    ce, _ = mean_over_seeds(config("ce", dataset__kind="spurious"), "worst_group_accuracy")
    ic, _ = mean_over_seeds(config("icda", dataset__kind="spurious"), "worst_group_accuracy")
    dt = time.perf_counter() - t0
    ok = ic - ce >= 0.05 and dt < 120
    report(capsys, 8, ok, f"worst-group CE {ce:.3f} vs ICDA {ic:.3f} (+{100 * (ic - ce):.1f} pts >= 5); {dt:.1f}s < 120s")
    assert ok


def test_criterion_9_meta(capsys):
    fams = suite("gradients")[0]["families"]
    fd = {k: v for k, v in fams.items() if k.startswith("meta")}
    fd_ok = all(v["passed"] for v in fd.values())
    base = dict(dataset__imbalance_ratio=100.0, dataset__n_per_class=1000, dataset__meta_per_class=3)
    frozen = run_seed(config("meta_icda", run__iterations=50, meta__eta2=0.0, meta__omega_init="zero", **base), 0)
    fixed = run_seed(config("icda", run__iterations=50, loss__fixed_alpha=0.5, **base), 0)
    bitwise = all(np.array_equal(v, fixed["_state"].params()[k]) for k, v in frozen["_state"].params().items())
    bitwise = bitwise and [r["loss"] for r in frozen["_trace"]] == [r["loss"] for r in fixed["_trace"]]
    ic, _ = mean_over_seeds(config("icda", **base), "tail_accuracy")
    mi, _ = mean_over_seeds(config("meta_icda", **base), "tail_accuracy")
    ok = fd_ok and bitwise and mi >= ic - 0.02
    worst = max(v["worst_error"] for v in fd.values())
    report(capsys, 9, ok, f"meta-gradient FD worst rel {worst:.1e} <= 1e-4; eta2=0 bitwise: {bitwise}; "
           f"tail acc ICDA {ic:.3f} vs Meta-ICDA {mi:.3f} (>= ICDA - 0.02)")
    assert ok


def flip_fraction(run, tau=0.9):
    state, train = run["_state"], run["_splits"].train
    h, _, _ = forward(state.backbone, state.head, train.features)
    return float(np.mean(alpha_scalar_noisy(target_cosine(h, state.head, train.labels), tau) < 0))


def test_criterion_10_noisy_rule(capsys):
    tau = 0.9
    cos = np.cos(np.linspace(0, np.pi, 2001))
    cos = np.concatenate([cos, [1 - 2 * tau, np.nextafter(1 - 2 * tau, 1.0)]])
    a = (1 - cos) / 2
    flipped = alpha_scalar_noisy(cos, tau) < 0
    rule_ok = bool(np.array_equal(flipped, a >= tau)) and np.array_equal(np.abs(alpha_scalar_noisy(cos, tau)), a)
    base = dict(dataset__noise_rate=0.4, loss__tau=tau)
    on, on_runs = mean_over_seeds(config("icda", loss__noise_mode=True, **base), "test_accuracy")
    off, _ = mean_over_seeds(config("icda", loss__noise_mode=False, **base), "test_accuracy")
    frac = np.mean([flip_fraction(r, tau) for r in on_runs])
    ok = rule_ok and on >= off
    report(capsys, 10, ok, f"flip exactly at (1-cos)/2 >= tau: {rule_ok}; test acc flip {on:.4f} vs no-flip {off:.4f}; "
           f"share of flipped training samples at the end {frac:.4f}")
    assert ok


def test_criterion_11_determinism(capsys, tmp_path):
    args = ["--method", "icda", "--override", "dataset.imbalance_ratio=100", "--override", "run.iterations=200"]
    for d in ("a", "b"):
        assert main(["train", "--seed", "7", "--out", str(tmp_path / f"train_{d}"), *args]) == 0
        for suite in ("reductions", "stats", "taylor"):
            assert main(["verify", suite, "--seed", "7", "--out", str(tmp_path / f"verify_{suite}_{d}")]) == 0
    names = ["train"] + [f"verify_{s}" for s in ("reductions", "stats", "taylor")]
    same = {n: (tmp_path / f"{n}_a" / "metrics.json").read_bytes() == (tmp_path / f"{n}_b" / "metrics.json").read_bytes()
            for n in names}
    ok = all(same.values())
    report(capsys, 11, ok, "identical metrics.json on repeat: " + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok
