"""Seeded synthetic classification problems.

Three pathologies are covered: exponential class imbalance, uniform or
pair-flip label noise, and a two-class problem whose spurious attribute is
strongly tied to the label at train time and anti-tied at test time.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import ContractViolation, make_rng

SPLITS = ("train", "val", "meta", "test")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    groups: np.ndarray | None = None
    split_tag: str = "train"

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ContractViolation(f"features {x.shape} and labels {y.shape} disagree")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ContractViolation("label out of range")
        if self.groups is not None:
            g = np.asarray(self.groups, dtype=np.int64)
            if g.shape != y.shape:
                raise ContractViolation("groups must have the same length as labels")
            object.__setattr__(self, "groups", g)
        if self.split_tag not in SPLITS:
            raise ContractViolation(f"unknown split tag {self.split_tag!r}")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx, split_tag: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.features[idx],
            self.labels[idx],
            self.num_classes,
            None if self.groups is None else self.groups[idx],
            split_tag or self.split_tag,
        )


@dataclass(frozen=True)
class ImbalanceProfile:
    ratio: float
    profile: str = "exponential"

    def counts(self, n_max: int, num_classes: int) -> np.ndarray:
        if self.ratio < 1:
            raise ContractViolation("imbalance ratio must be >= 1")
        if self.profile != "exponential":
            raise ContractViolation(f"unsupported profile {self.profile!r}")
        c = np.arange(num_classes)
        exponent = c / max(num_classes - 1, 1)
        return np.array([int(round(n_max * self.ratio ** (-e))) for e in exponent])


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "uniform"
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "pair_flip"):
            raise ContractViolation(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ContractViolation("noise rate must lie in [0, 1)")


def mixture_means(C: int, D: int, separation: float, rng) -> np.ndarray:
    """Class means at ``separation`` times orthonormal directions when C <= D,
    otherwise random points on the sphere of that radius."""
    if C < 2 or D < 2 or separation <= 0:
        raise ContractViolation("mixture needs C>=2, D>=2, separation>0")
    rng = make_rng(rng)
    if C <= D:
        q, _ = np.linalg.qr(rng.standard_normal((D, D)))
        return separation * q[:, :C].T
    m = rng.standard_normal((C, D))
    return separation * m / np.linalg.norm(m, axis=1, keepdims=True)


def sample_mixture(means: np.ndarray, n_per_class: int, rng, scale: float = 1.0,
                   split_tag: str = "train") -> Dataset:
    rng = make_rng(rng)
    C, D = means.shape
    labels = np.repeat(np.arange(C), n_per_class)
    x = means[labels] + scale * rng.standard_normal((labels.size, D))
    return Dataset(x, labels, C, split_tag=split_tag)


def make_gaussian_mixture(C: int, D: int, separation: float, n_per_class: int, rng,
                          scale: float = 1.0) -> Dataset:
    """Balanced isotropic Gaussian classes (unit covariance times ``scale``)."""
    rng = make_rng(rng)
    means = mixture_means(C, D, separation, rng)
    return sample_mixture(means, n_per_class, rng, scale)


def make_spurious(
    d_signal: int,
    d_spur: int,
    n: int,
    rng,
    train_group_ratio: float = 0.8,
    test_group_ratio: float = 0.1,
    label_flip: float = 0.25,
    signal_strength: float = 1.0,
    spur_strength: float = 1.0,
    noise: float = 1.0,
    n_test: int | None = None,
) -> tuple[Dataset, Dataset]:
    """Two-class problem with a colour-like attribute.

    A latent class ``z`` drives the signal block; the observed label is ``z``
    flipped with probability ``label_flip``. The binary attribute ``a`` agrees
    with the observed label (``a == y``) with probability ``ratio`` and is
    written into the spurious block as a signed offset. Groups are
    ``2*y + a``.
    """
    for r in (train_group_ratio, test_group_ratio):
        if not 0.0 < r < 1.0:
            raise ContractViolation("group ratios must lie in (0, 1)")
    if d_signal < 1 or d_spur < 1:
        raise ContractViolation("d_signal and d_spur must be >= 1")
    rng = make_rng(rng)
    out = []
    for size, ratio, tag in ((n, train_group_ratio, "train"), (n_test or n, test_group_ratio, "test")):
        z = rng.integers(0, 2, size)
        flip = rng.random(size) < label_flip
        y = np.where(flip, 1 - z, z)
        agree = rng.random(size) < ratio
        a = np.where(agree, y, 1 - y)
        sig = signal_strength * (2 * z[:, None] - 1) + noise * rng.standard_normal((size, d_signal))
        spur = spur_strength * (2 * a[:, None] - 1) + noise * rng.standard_normal((size, d_spur))
        x = np.hstack([sig, spur])
        out.append(Dataset(x, y, 2, groups=2 * y + a, split_tag=tag))
    return out[0], out[1]


def apply_imbalance(d: Dataset, profile: ImbalanceProfile, rng, n_max: int | None = None) -> Dataset:
    """Subsample each class to the exponential profile; class 0 is the head."""
    rng = make_rng(rng)
    counts = d.class_counts()
    n_max = int(counts[0]) if n_max is None else n_max
    target = profile.counts(n_max, d.num_classes)
    keep = []
    for c in range(d.num_classes):
        idx = np.flatnonzero(d.labels == c)
        if target[c] > idx.size:
            raise ContractViolation(f"class {c}: need {target[c]} samples, have {idx.size}")
        if target[c] == idx.size:
            keep.append(idx)
        else:
            keep.append(np.sort(rng.choice(idx, size=target[c], replace=False)))
    return d.subset(np.concatenate(keep))


def inject_noise(labels, spec: NoiseSpec, num_classes: int, rng) -> np.ndarray:
    rng = make_rng(rng)
    labels = np.asarray(labels, dtype=np.int64)
    corrupt = rng.random(labels.size) < spec.rate
    out = labels.copy()
    if spec.kind == "pair_flip":
        out[corrupt] = (labels[corrupt] + 1) % num_classes
    else:
        # shift by 1..C-1 so the new label is never the old one
        offs = rng.integers(1, num_classes, labels.size)
        out[corrupt] = (labels[corrupt] + offs[corrupt]) % num_classes
    return out


def split_meta(d: Dataset, per_class: int, rng) -> tuple[Dataset, Dataset]:
    """Carve ``per_class`` samples of every class out of ``d``."""
    rng = make_rng(rng)
    meta_idx = []
    for c in range(d.num_classes):
        idx = np.flatnonzero(d.labels == c)
        if idx.size < per_class:
            raise ContractViolation(f"class {c} has {idx.size} < {per_class} samples")
        if per_class:
            meta_idx.append(rng.choice(idx, size=per_class, replace=False))
    meta_idx = np.sort(np.concatenate(meta_idx)) if meta_idx else np.zeros(0, np.int64)
    mask = np.ones(len(d), bool)
    mask[meta_idx] = False
    return d.subset(np.flatnonzero(mask)), d.subset(meta_idx, "meta")


def save_text(d: Dataset, path) -> None:
    """Columnar text: a header line ``N D C has_groups split``, then
    ``label group x_1 .. x_D`` per sample (group is -1 when absent)."""
    has_g = d.groups is not None
    g = d.groups if has_g else np.full(len(d), -1)
    buf = io.StringIO()
    buf.write(f"{len(d)} {d.dim} {d.num_classes} {int(has_g)} {d.split_tag}\n")
    for i in range(len(d)):
        row = " ".join(repr(float(v)) for v in d.features[i])
        buf.write(f"{d.labels[i]} {g[i]} {row}\n")
    Path(path).write_text(buf.getvalue())


def load_text(path) -> Dataset:
    lines = Path(path).read_text().splitlines()
    n, dim, C, has_g, tag = lines[0].split()
    n, dim = int(n), int(dim)
    rows = np.array([[float(t) for t in ln.split()] for ln in lines[1 : 1 + n]]).reshape(n, dim + 2)
    groups = rows[:, 1].astype(np.int64) if int(has_g) else None
    return Dataset(rows[:, 2:], rows[:, 0].astype(np.int64), int(C), groups, tag)
