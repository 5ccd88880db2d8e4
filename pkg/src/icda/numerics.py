"""Dense float64 kernels shared by every other module.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
The helpers here only add the shape/finiteness contracts and the handful of
numerically careful reductions the losses rely on.
"""

from __future__ import annotations

import numpy as np

JITTER_MAX = 1e-4
JITTER_START = 1e-8
COSINE_EPS = 1e-12


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class SingularityError(np.linalg.LinAlgError):
    """Cholesky failed even at the largest allowed diagonal jitter."""


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def require_finite(x: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(x)):
        raise ContractViolation(f"{name} contains non-finite entries")


def make_rng(seed) -> np.random.Generator:
    """Seeded generator; ``Generator.spawn`` gives independent child streams."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return rng.spawn(n)


def log_sum_exp(v, axis: int = -1) -> np.ndarray | float:
    """log(sum(exp(v))) along ``axis`` with max subtraction.

    Accepts a 1-D vector (returns a float) or a stacked array, reducing over
    ``axis``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ContractViolation("log_sum_exp of an empty vector")
    m = np.max(v, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    out = np.squeeze(out, axis=axis)
    if out.ndim == 0:
        return float(out)
    return out


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def cholesky_psd(m, jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor of ``m + jitter*I``.

    If the factorization fails the jitter is raised geometrically (x10,
    starting from 1e-8 when ``jitter`` is zero) up to 1e-4.
    """
    m = as_matrix(m, "m")
    if m.shape[0] != m.shape[1]:
        raise ContractViolation(f"cholesky_psd needs a square matrix, got {m.shape}")
    require_finite(m, "m")
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-10):
        raise ContractViolation("cholesky_psd input is not symmetric within 1e-10")
    eye = np.eye(m.shape[0])
    j = float(jitter)
    while True:
        try:
            return np.linalg.cholesky(m + j * eye)
        except np.linalg.LinAlgError:
            if j >= JITTER_MAX:
                raise SingularityError(
                    f"matrix not positive definite even with jitter {j:g}"
                ) from None
            j = min(JITTER_MAX, JITTER_START if j <= 0.0 else j * 10.0)


def sample_mvn(mean, cov, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``mean + L z`` with ``L`` the (jittered) Cholesky factor of ``cov``.

    A zero covariance returns ``mean`` exactly. ``size`` draws a stack of
    samples with shape ``(size, dim)``.
    """
    mean = as_vector(mean, "mean")
    cov = as_matrix(cov, "cov")
    d = mean.shape[0]
    if cov.shape != (d, d):
        raise ContractViolation(f"cov shape {cov.shape} does not match mean dim {d}")
    shape = (d,) if size is None else (size, d)
    if not np.any(cov):
        return np.broadcast_to(mean, shape).copy()
    L = cholesky_psd(cov)
    z = rng.standard_normal(shape)
    return mean + z @ L.T


def cosine(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ContractViolation(f"cosine length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < COSINE_EPS or nb < COSINE_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Pairwise cosines between rows of ``h`` (N x H) and rows of ``w`` (C x H)."""
    hn = np.linalg.norm(h, axis=1)
    wn = np.linalg.norm(w, axis=1)
    denom = np.outer(hn, wn)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (h @ w.T) / denom
    degenerate = (hn[:, None] < COSINE_EPS) | (wn[None, :] < COSINE_EPS)
    cos = np.where(degenerate, 0.0, cos)
    return np.clip(cos, -1.0, 1.0)
