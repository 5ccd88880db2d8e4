import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import central_diff, make_instance, rel_err
from icda import losses as L
from icda.model import LinearHead
from icda.numerics import ContractViolation
from icda.stats import ClassStats, ConfusionRates
from icda.strength import StrengthMatrix


def test_lambda_schedule():
    assert L.lambda_at(0, 100, 0.5) == 0.0
    assert L.lambda_at(100, 100, 0.5) == 0.5
    assert L.lambda_at(50, 100, 0.5) == 0.25
    with pytest.raises(ContractViolation):
        L.lambda_at(101, 100, 0.5)


def test_ce_examples(rng):
    assert L.ce_loss(np.zeros((3, 4)), np.array([0, 1, 2]))[0] == pytest.approx(math.log(4), abs=1e-15)
    assert L.ce_loss(np.array([[100.0, 0.0]]), np.array([0]))[0] < 1e-40
    logits, y = rng.normal(size=(5, 3)), rng.integers(0, 3, 5)
    naive = np.mean([math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(logits, y)])
    assert L.ce_loss(logits, y)[0] == pytest.approx(naive, rel=1e-14)


def test_la_examples(rng):
    logits, y = rng.normal(size=(6, 4)), rng.integers(0, 4, 6)
    assert L.la_loss(logits, y, np.full(4, 0.25))[0] == L.ce_loss(logits, y)[0]
    pi = np.array([0.9, 0.1])
    lg = np.array([[0.3, 0.2]])
    assert L.la_loss(lg, np.array([1]), pi)[0] > L.ce_loss(lg, np.array([1]))[0]
    pi4 = rng.dirichlet(np.ones(4))
    shifted = logits + np.log(pi4)
    assert L.la_loss(logits, y, pi4)[0] == pytest.approx(L.ce_loss(shifted, y)[0], abs=1e-12)


def test_isda_identity_cov_by_hand():
    head = LinearHead(np.array([[1.0, 0.0], [0.0, 2.0]]), np.zeros(2))
    stats = ClassStats(np.zeros((2, 2)), np.stack([np.eye(2)] * 2), np.ones(2))
    phi, _ = L.isda_phi(np.zeros((1, 2)), np.array([0]), head, stats, 0.5)
    assert phi[0, 1] == pytest.approx(0.25 * (1 + 4))
    assert phi[0, 0] == 0.0
    h, y = np.array([[0.3, -0.2]]), np.array([0])
    res = L.isda_loss(h, y, head, stats, 0.0)
    assert res.loss == L.ce_loss(h @ head.w.T, y)[0]


def test_risda_single_confusing_class():
    head = LinearHead(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.zeros(3))
    mean = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0]])
    stats = ClassStats(mean, np.zeros((3, 2, 2)), np.ones(3))
    eps = np.zeros((3, 3))
    eps[0, 2] = 1.0
    phi, _, _ = L.risda_phi(np.zeros((1, 2)), np.array([0]), head, stats, ConfusionRates(eps), 0.5, 0.5)
    # only mu_2 enters: alpha_r * dw_c . mu_2 with dw_1=(1,0), dw_2=(0,1)
    np.testing.assert_allclose(phi[0], [0.0, 0.0, 1.5])


def test_icda_perturbations_triple_loop():
    d = make_instance(3)
    h, y, head, stats, S = d["h"], d["y"], d["head"], d["stats"], d["strengths"]
    lam, beta, pi = d["lam"], d["beta"], d["pi"]
    terms = L.icda_perturbations(h, y, head, stats, S, lam, beta, pi)
    N, C = len(y), head.w.shape[0]
    for i in range(N):
        for c in range(C):
            if c == y[i]:
                assert terms.phi[i, c] == 0.0
                continue
            dw = head.w[c] - head.w[y[i]]
            P = dw @ stats.cov[y[i]] @ dw
            for j in range(C):
                if j != y[i]:
                    P += S.alpha[i, j] / (C - 1) * (dw @ stats.cov[j] @ dw)
            Q = S.alpha[i, c] / (C - 1) * (dw @ stats.mean[c])
            expect = 0.5 * lam * P + lam * Q + math.log(pi[c] / pi[y[i]]) + beta * S.alpha_scalar[i]
            assert terms.phi[i, c] == pytest.approx(expect, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("diagonal", [False, True])
@pytest.mark.parametrize("method", ["ce", "la", "isda", "risda", "icda"])
def test_gradients_match_central_differences(method, diagonal):
    for seed in range(5):
        d = make_instance(seed, diagonal=diagonal)
        h, head = d["h"].copy(), d["head"].copy()

        def run():
            if method == "ce":
                return L._perturbed_ce(h, d["y"], head, None, 0.0, None, None)
            if method == "la":
                return L._perturbed_ce(h, d["y"], head, L.la_shift(d["pi"], d["y"]), 0.0, None, None)
            if method == "isda":
                return L.isda_loss(h, d["y"], head, d["stats"], d["lam"])
            if method == "risda":
                return L.risda_loss(h, d["y"], head, d["stats"], d["rates"], 0.3, 0.7)
            return L.icda_loss(h, d["y"], head, d["stats"], d["strengths"],
                               L.IcdaConfig(d["lam"], d["beta"]), 1, 1, d["pi"])

        res = run()
        f = lambda: run().loss  # noqa: E731
        assert rel_err(res.d_w, central_diff(f, head.w)) < 1e-6
        assert rel_err(res.d_b, central_diff(f, head.b)) < 1e-6
        assert rel_err(res.d_features, central_diff(f, h)) < 1e-6


@pytest.mark.parametrize("diagonal", [False, True])
def test_reduction_identities(diagonal):
    for seed in range(100):
        d = make_instance(seed, diagonal=diagonal)
        h, y, head, stats = d["h"], d["y"], d["head"], d["stats"]
        C = head.w.shape[0]
        la = L._perturbed_ce(h, y, head, L.la_shift(d["pi"], y), 0.0, None, None)
        icda = L.icda_loss(h, y, head, stats, d["strengths"], L.IcdaConfig(0.0, 0.0), 1, 1, d["pi"])
        assert np.max(np.abs(icda.per_sample - la.per_sample)) <= 1e-12
        zero = StrengthMatrix(np.zeros((len(y), C)), np.zeros(len(y)))
        isda = L.isda_loss(h, y, head, stats, d["lam"])
        icda0 = L.icda_loss(h, y, head, stats, zero, L.IcdaConfig(d["lam"], 0.0), 1, 1, np.full(C, 1 / C))
        assert np.max(np.abs(icda0.per_sample - isda.per_sample)) <= 1e-12
        risda = L.risda_loss(h, y, head, stats, ConfusionRates.zeros(C), 0.0, d["lam"] / 2)
        assert np.max(np.abs(risda.per_sample - isda.per_sample)) <= 1e-12
        ce = L.ce_loss(h @ head.w.T + head.b, y)[0]
        assert L.la_loss(h @ head.w.T + head.b, y, np.full(C, 1 / C))[0] == pytest.approx(ce, abs=1e-12)


def test_icda_equals_ce_when_balanced_and_off():
    d = make_instance(8)
    C = d["head"].w.shape[0]
    res = L.icda_loss(d["h"], d["y"], d["head"], d["stats"], d["strengths"], L.IcdaConfig(0.0, 0.0), 1, 1,
                      np.full(C, 1 / C))
    assert res.loss == pytest.approx(L.ce_loss(d["h"] @ d["head"].w.T + d["head"].b, d["y"])[0], abs=1e-12)


@given(st.integers(0, 10_000), st.floats(0.01, 2.0))
def test_icda_monotone_in_logits(seed, bump):
    d = make_instance(seed)
    terms = L.icda_perturbations(d["h"], d["y"], d["head"], d["stats"], d["strengths"], d["lam"], d["beta"],
                                 d["pi"])
    logits = d["h"] @ d["head"].w.T + d["head"].b
    phi = np.minimum(terms.phi, L.PHI_CLAMP)
    base = L._shifted_ce(logits, d["y"], phi)[1]
    i, y = 0, d["y"][0]
    up = logits.copy()
    up[i, y] += bump
    assert L._shifted_ce(up, d["y"], phi)[1][i] <= base[i]
    c = (y + 1) % logits.shape[1]
    other = logits.copy()
    other[i, c] += bump
    assert L._shifted_ce(other, d["y"], phi)[1][i] >= base[i]


def test_icda_increasing_in_beta():
    d = make_instance(5)
    assert np.all(d["strengths"].alpha_scalar > 0)
    losses = [L.icda_loss(d["h"], d["y"], d["head"], d["stats"], d["strengths"], L.IcdaConfig(d["lam"], b),
                          1, 1, d["pi"]).loss for b in (0.0, 0.1, 0.5, 1.0)]
    assert all(a < b for a, b in zip(losses, losses[1:]))


def test_clamp_keeps_loss_finite_and_freezes_gradient():
    d = make_instance(2)
    big = ClassStats(d["stats"].mean, 1e6 * d["stats"].cov, d["stats"].count)
    res = L.icda_loss(d["h"], d["y"], d["head"], big, d["strengths"], L.IcdaConfig(1.0, 10.0), 1, 1, d["pi"])
    assert np.isfinite(res.loss) and np.all(np.isfinite(res.d_w))
    assert np.max(res.aug_logits - (d["h"] @ d["head"].w.T + d["head"].b)) <= L.PHI_CLAMP + 1e-9
