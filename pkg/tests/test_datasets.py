import numpy as np
import pytest
from scipy.stats import norm

from icda import datasets as ds
from icda.numerics import ContractViolation


def test_mixture_shape_and_counts():
    d = ds.make_gaussian_mixture(3, 4, 3.0, 100, 0)
    assert len(d) == 300
    assert list(d.class_counts()) == [100, 100, 100]


def test_mixture_determinism():
    a = ds.make_gaussian_mixture(4, 5, 2.0, 20, 9)
    b = ds.make_gaussian_mixture(4, 5, 2.0, 20, 9)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_two_class_mixture_bayes_rate():
    # orthonormal means at distance 6*sqrt(2); Bayes error Phi(-d/2) for unit covariance
    for seed in range(5):
        means = ds.mixture_means(2, 2, 6.0, seed)
        gap = np.linalg.norm(means[0] - means[1])
        assert 1 - norm.cdf(-gap / 2) > 0.99
        d = ds.sample_mixture(means, 2000, seed)
        w = means[1] - means[0]
        pred = (d.features @ w > w @ (means[0] + means[1]) / 2).astype(int)
        assert np.mean(pred == d.labels) > 0.99


def test_spurious_group_ratio_and_flip():
    train, test = ds.make_spurious(2, 2, 10_000, 0, train_group_ratio=0.8)
    c0 = train.labels == 0
    a = train.groups % 2
    frac = np.mean(a[c0] == 0)
    assert 0.78 <= frac <= 0.82
    # no label noise: labels equal the generating class, so the signal block agrees in sign
    tr, _ = ds.make_spurious(1, 1, 2000, 1, label_flip=0.0, signal_strength=50.0)
    np.testing.assert_array_equal((tr.features[:, 0] > 0).astype(int), tr.labels)


def test_spurious_balanced_groups_at_half():
    _, test = ds.make_spurious(2, 2, 100, 3, test_group_ratio=0.5, n_test=20_000)
    counts = np.bincount(test.groups, minlength=4) / len(test)
    assert np.all(np.abs(counts - 0.25) < 0.02)


def test_spurious_attribute_fails_on_flipped_test():
    train, test = ds.make_spurious(2, 2, 10_000, 5, train_group_ratio=0.8, test_group_ratio=0.1)

    def spur_acc(d):
        pred = (d.features[:, 2:].sum(axis=1) > 0).astype(int)
        return np.mean(pred == d.labels)

    assert spur_acc(train) > 0.7
    assert spur_acc(test) < 0.5


def test_imbalance_profile():
    assert list(ds.ImbalanceProfile(100).counts(1000, 10))[-1] == 10
    assert list(ds.ImbalanceProfile(10).counts(1000, 2)) == [1000, 100]


def test_apply_imbalance_keeps_rows():
    d = ds.make_gaussian_mixture(3, 3, 3.0, 50, 1)
    same = ds.apply_imbalance(d, ds.ImbalanceProfile(1), 0)
    np.testing.assert_array_equal(np.sort(same.features, axis=0), np.sort(d.features, axis=0))
    imb = ds.apply_imbalance(d, ds.ImbalanceProfile(10), 0)
    assert list(imb.class_counts()) == [50, 16, 5]
    rows = {tuple(r) for r in d.features}
    assert all(tuple(r) in rows for r in imb.features)
    with pytest.raises(ContractViolation):
        ds.apply_imbalance(d, ds.ImbalanceProfile(10), 0, n_max=80)


def test_inject_noise():
    labels = np.random.default_rng(0).integers(0, 10, 10_000)
    np.testing.assert_array_equal(ds.inject_noise(labels, ds.NoiseSpec("uniform", 0.0), 10, 1), labels)
    noisy = ds.inject_noise(labels, ds.NoiseSpec("uniform", 0.4), 10, 1)
    assert 0.385 <= np.mean(noisy != labels) <= 0.415
    flipped = ds.inject_noise(np.array([2] * 50), ds.NoiseSpec("pair_flip", 0.99), 3, 2)
    assert set(flipped) <= {0, 2} and 0 in set(flipped)
    with pytest.raises(ContractViolation):
        ds.NoiseSpec("weird", 0.1)


def test_split_meta():
    d = ds.make_gaussian_mixture(10, 12, 3.0, 30, 0)
    train, meta = ds.split_meta(d, 10, 1)
    assert len(meta) == 100 and list(meta.class_counts()) == [10] * 10
    assert len(train) + len(meta) == len(d)
    rows_t = {tuple(r) for r in train.features}
    assert not any(tuple(r) in rows_t for r in meta.features)
    t0, m0 = ds.split_meta(d, 0, 1)
    assert len(m0) == 0
    np.testing.assert_array_equal(t0.features, d.features)


def test_text_roundtrip(tmp_path):
    train, _ = ds.make_spurious(2, 1, 30, 4)
    ds.save_text(train, tmp_path / "d.txt")
    back = ds.load_text(tmp_path / "d.txt")
    np.testing.assert_array_equal(back.features, train.features)
    np.testing.assert_array_equal(back.groups, train.groups)


def test_dataset_validation():
    with pytest.raises(ContractViolation):
        ds.Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(ContractViolation):
        ds.Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
