"""Small MLP backbone, linear head, momentum SGD and checkpoint I/O.

Gradients are written out by hand; there is no autodiff. Parameters live in
plain numpy arrays owned by :class:`Backbone` / :class:`LinearHead` and are
updated in place by :func:`sgd_step`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ContractViolation, make_rng


@dataclass
class Backbone:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    relu_output: bool = False
    version: int = 0

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights)


@dataclass
class LinearHead:
    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ContractViolation(f"head shapes w={self.w.shape} b={self.b.shape} disagree")

    @property
    def num_classes(self) -> int:
        return self.w.shape[0]

    def copy(self) -> "LinearHead":
        return LinearHead(self.w.copy(), self.b.copy())


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractViolation("momentum must lie in [0, 1)")
        its = [s[0] for s in self.schedule]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ContractViolation("schedule iterations must be strictly increasing")

    def lr_at(self, iteration: int) -> float:
        lr = self.learning_rate
        for it, mult in self.schedule:
            if iteration >= it:
                lr *= mult
        return lr


@dataclass
class Cache:
    x: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    features: np.ndarray
    head: LinearHead
    backbone: Backbone
    version: int = field(default=0)


def init_backbone(in_dim: int, widths, rng, relu_output: bool = False) -> Backbone:
    """Fan-in scaled uniform init; ``widths`` lists every layer's output size,
    the last entry being the feature dimension H."""
    rng = make_rng(rng)
    dims = [in_dim, *widths]
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        ws.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return Backbone(ws, bs, relu_output)


def init_head(feat_dim: int, num_classes: int, rng) -> LinearHead:
    rng = make_rng(rng)
    bound = 1.0 / np.sqrt(feat_dim)
    return LinearHead(rng.uniform(-bound, bound, (num_classes, feat_dim)), np.zeros(num_classes))


def backbone_forward(bb: Backbone, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != bb.in_dim:
        raise ContractViolation(f"input shape {x.shape} does not match backbone input {bb.in_dim}")
    pre, post = [], []
    a = x
    last = bb.depth - 1
    for l, (W, b) in enumerate(zip(bb.weights, bb.biases)):
        z = a @ W.T + b
        pre.append(z)
        a = np.maximum(z, 0.0) if (l < last or bb.relu_output) else z
        post.append(a)
    return a, pre, post


def forward(bb: Backbone, head: LinearHead, x: np.ndarray):
    """Returns ``(features, logits, cache)``."""
    h, pre, post = backbone_forward(bb, x)
    if h.shape[1] != head.w.shape[1]:
        raise ContractViolation(f"feature dim {h.shape[1]} != head input {head.w.shape[1]}")
    logits = h @ head.w.T + head.b
    return h, logits, Cache(x, pre, post, h, head, bb, bb.version)


def backward_backbone(cache: Cache, d_features: np.ndarray) -> dict[str, np.ndarray]:
    bb = cache.backbone
    if cache.version != bb.version:
        raise ContractViolation("stale cache: backbone parameters changed since forward")
    grads = {}
    d = np.asarray(d_features, dtype=np.float64)
    last = bb.depth - 1
    for l in range(last, -1, -1):
        if l < last or bb.relu_output:
            d = d * (cache.pre[l] > 0)
        a_in = cache.x if l == 0 else cache.post[l - 1]
        grads[f"backbone.W{l}"] = d.T @ a_in
        grads[f"backbone.b{l}"] = d.sum(axis=0)
        if l > 0:
            d = d @ bb.weights[l]
    return grads


def backward(cache: Cache, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a loss whose only dependence on the head is through the
    plain logits."""
    d_logits = np.asarray(d_logits, dtype=np.float64)
    grads = {"head.w": d_logits.T @ cache.features, "head.b": d_logits.sum(axis=0)}
    grads.update(backward_backbone(cache, d_logits @ cache.head.w))
    return grads


def parameters(bb: Backbone | None, head: LinearHead | None) -> dict[str, np.ndarray]:
    """Name -> array views; mutating them mutates the model."""
    out = {}
    if bb is not None:
        for l, (W, b) in enumerate(zip(bb.weights, bb.biases)):
            out[f"backbone.W{l}"] = W
            out[f"backbone.b{l}"] = b
    if head is not None:
        out["head.w"] = head.w
        out["head.b"] = head.b
    return out


def _is_weight(name: str) -> bool:
    return name.endswith(".w") or ".W" in name


def sgd_step(params: dict, grads: dict, state: dict, cfg: SgdConfig, iteration: int,
             backbone: Backbone | None = None) -> dict:
    """In-place momentum SGD: ``v = m*v + g + wd*p`` (weights only), ``p -= lr*v``."""
    lr = cfg.lr_at(iteration)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractViolation(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        if cfg.weight_decay and _is_weight(name):
            g = g + cfg.weight_decay * p
        v = state.get(name)
        if cfg.momentum:
            v = g.copy() if v is None else cfg.momentum * v + g
        else:
            v = g
        state[name] = v
        p -= lr * v
    if backbone is not None:
        backbone.version += 1
    return state


CKPT_MAGIC = b"ICDACKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Binary blob: magic, version, count, then per tensor
    (name length, name, ndim, shape..., float64 data little-endian)."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(params)))
        for name, arr in params.items():
            raw = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f8")
            f.write(struct.pack("<I", len(raw)) + raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, "<f8", size, off).reshape(shape).copy()
        off += 8 * size
    return out
