"""Frozen toy dual encoder: image MLP, mean-pooled text MLP, cosine logits.

Both encoders are two-layer perceptrons with a tanh hidden layer.  Weights
are stored input-major (``x @ w1``) and are read-only once constructed.

Encoder passes are counted through :func:`count_passes` so that training
loops can be audited against :func:`aptlab.training.cost_report`.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import struct
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import DiffGraph

MAGIC = b"APTM"
VERSION = 1
_WEIGHTS = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4", "vocab")

_counter: contextvars.ContextVar[Counter | None] = contextvars.ContextVar(
    "aptlab_pass_counter", default=None
)


@contextlib.contextmanager
def count_passes():
    """Collect encoder pass counts made inside the block.

    Keys are ``image_fwd``, ``image_bwd``, ``text_fwd`` and ``text_bwd``; one
    unit is one pass of a whole batch (or of the whole prompt set).
    """
    c = Counter()
    token = _counter.set(c)
    try:
        yield c
    finally:
        _counter.reset(token)


@contextlib.contextmanager
def uncounted():
    """Suspend pass counting (e.g. for monitoring inside a counted run)."""
    token = _counter.set(None)
    try:
        yield
    finally:
        _counter.reset(token)


def bump(key: str, n: int = 1) -> None:
    c = _counter.get()
    if c is not None:
        c[key] += n


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DualEncoderModel:
    w1: np.ndarray  # (dx, h)
    b1: np.ndarray
    w2: np.ndarray  # (h, d)
    b2: np.ndarray
    w3: np.ndarray  # (d, h)
    b3: np.ndarray
    w4: np.ndarray  # (h, d)
    b4: np.ndarray
    vocab: np.ndarray  # (v, d); rows [0, n_classes) are class-name tokens
    n_classes: int
    tau: float = 0.07

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        dx, h = self.w1.shape
        d = self.w2.shape[1]
        shapes = {
            "b1": (h,), "w2": (h, d), "b2": (d,), "w3": (d, h), "b3": (h,),
            "w4": (h, d), "b4": (d,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.vocab.ndim != 2 or self.vocab.shape[1] != d:
            raise ValueError(f"vocab must be (V, {d}), got {self.vocab.shape}")
        if not 2 <= self.n_classes <= self.vocab.shape[0]:
            raise ValueError(f"n_classes={self.n_classes} incompatible with vocab size")
        for name in _WEIGHTS:
            arr = np.array(getattr(self, name), dtype=np.float64, order="C")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def init(cls, seed: int = 42, dx: int = 64, h: int = 64, d: int = 32,
             v: int = 64, n_classes: int = 8, tau: float = 0.07) -> "DualEncoderModel":
        """Gaussian weights with std 1/sqrt(fan_in), zero biases, N(0,1) vocab."""
        rng = np.random.default_rng(seed)
        return cls(
            w1=rng.normal(0.0, 1.0 / np.sqrt(dx), (dx, h)), b1=np.zeros(h),
            w2=rng.normal(0.0, 1.0 / np.sqrt(h), (h, d)), b2=np.zeros(d),
            w3=rng.normal(0.0, 1.0 / np.sqrt(d), (d, h)), b3=np.zeros(h),
            w4=rng.normal(0.0, 1.0 / np.sqrt(h), (h, d)), b4=np.zeros(d),
            vocab=rng.normal(0.0, 1.0, (v, d)),
            n_classes=n_classes, tau=tau,
        )

    @property
    def dims(self):
        """(dx, h, d, v, n_classes)"""
        return (self.w1.shape[0], self.w1.shape[1], self.w2.shape[1],
                self.vocab.shape[0], self.n_classes)

    @property
    def embed_dim(self) -> int:
        return self.w2.shape[1]

    @property
    def class_embeddings(self) -> np.ndarray:
        return self.vocab[: self.n_classes]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in _WEIGHTS:
            h.update(getattr(self, name).tobytes())
        h.update(struct.pack("<d", self.tau))
        return h.hexdigest()

    def with_vocab(self, vocab: np.ndarray) -> "DualEncoderModel":
        return replace(self, vocab=vocab)


# ---------------------------------------------------------------------------
# numpy encoders (forward only)
# ---------------------------------------------------------------------------


def encode_image(model: DualEncoderModel, images) -> np.ndarray:
    """Image features, shape (B, d)."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 1:
        return encode_image(model, x[None])[0]
    if x.ndim != 2 or x.shape[1] != model.w1.shape[0]:
        raise ValueError(f"images must be (B, {model.w1.shape[0]}), got {x.shape}")
    bump("image_fwd")
    return np.tanh(x @ model.w1 + model.b1) @ model.w2 + model.b2


def encode_text(model: DualEncoderModel, tokens) -> np.ndarray:
    """Text features from token vectors.

    ``tokens`` is one sequence ``(L, d)`` giving a ``(d,)`` feature, or a
    stack of equal-length sequences ``(C, L, d)`` giving ``(C, d)``.
    """
    t = np.asarray(tokens, dtype=np.float64)
    d = model.embed_dim
    if t.ndim not in (2, 3) or t.shape[-1] != d:
        raise ValueError(f"token vectors must have trailing dim {d}, got {t.shape}")
    if t.shape[-2] == 0:
        raise ValueError("empty token sequence")
    bump("text_fwd")
    u = t.mean(axis=-2)
    return np.tanh(u @ model.w3 + model.b3) @ model.w4 + model.b4


def similarity(zv, zt) -> float:
    """Cosine similarity of two feature vectors."""
    zv = np.asarray(zv, dtype=np.float64)
    zt = np.asarray(zt, dtype=np.float64)
    nv = np.linalg.norm(zv)
    nt = np.linalg.norm(zt)
    if nv == 0.0 or nt == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(zv @ zt / (nv * nt), -1.0, 1.0))


def cosine_logits(model: DualEncoderModel, image_features, text_features) -> np.ndarray:
    zv = np.atleast_2d(image_features)
    zt = np.asarray(text_features, dtype=np.float64)
    nv = np.linalg.norm(zv, axis=1, keepdims=True)
    nt = np.linalg.norm(zt, axis=1, keepdims=True)
    if np.any(nv == 0.0) or np.any(nt == 0.0):
        raise ValueError("cosine similarity of a zero vector is undefined")
    return (zv / nv) @ (zt / nt).T / model.tau


def class_probabilities(model: DualEncoderModel, images, text_features) -> np.ndarray:
    """Softmax over temperature-scaled cosine similarities; (B, C) or (C,)."""
    text_features = np.asarray(text_features, dtype=np.float64)
    if text_features.ndim != 2 or text_features.shape[0] < 2:
        raise ValueError("need text features for at least two classes")
    single = np.asarray(images).ndim == 1
    s = cosine_logits(model, encode_image(model, np.atleast_2d(images)), text_features)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if single else p


def predict(model: DualEncoderModel, images, text_features) -> np.ndarray:
    """Most probable class per image; ties go to the lowest index."""
    single = np.asarray(images).ndim == 1
    s = cosine_logits(model, encode_image(model, np.atleast_2d(images)), text_features)
    out = np.argmax(s, axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# graph builders (differentiable)
# ---------------------------------------------------------------------------


def _tap(g: DiffGraph, node: int, branch: str) -> int:
    return g.tap(node, on_forward=lambda: bump(f"{branch}_fwd"),
                 on_backward=lambda: bump(f"{branch}_bwd"))


def image_encoder_graph(g: DiffGraph, model: DualEncoderModel, x: int) -> int:
    """Append the image encoder to ``g``; ``x`` is a (B, dx) node."""
    w1, b1, w2, b2 = (g.leaf(getattr(model, n)) for n in ("w1", "b1", "w2", "b2"))
    hid = g.tanh(g.add(g.matmul(x, w1), b1))
    return _tap(g, g.add(g.matmul(hid, w2), b2), "image")


def text_encoder_graph(g: DiffGraph, model: DualEncoderModel, sequences: list[int]) -> int:
    """Append the text encoder for C sequences (each an (L, d) node) -> (C, d)."""
    if not sequences:
        raise ValueError("empty prompt set")
    pooled = g.concat(*(g.mean(s, axis=0, keepdims=True) for s in sequences))
    w3, b3, w4, b4 = (g.leaf(getattr(model, n)) for n in ("w3", "b3", "w4", "b4"))
    hid = g.tanh(g.add(g.matmul(pooled, w3), b3))
    return _tap(g, g.add(g.matmul(hid, w4), b4), "text")


def logits_graph(g: DiffGraph, model: DualEncoderModel, image_feats: int, text_feats: int) -> int:
    return g.scale(g.cosine(image_feats, text_feats), 1.0 / model.tau)


# ---------------------------------------------------------------------------
# class-token grounding
# ---------------------------------------------------------------------------


def ground_class_tokens(model: DualEncoderModel, prototypes, steps: int = 150,
                        lr: float = 0.05) -> DualEncoderModel:
    """Fit the class-name rows of the vocabulary to class prototype images.

    This stands in for contrastive pre-training: only the ``n_classes``
    class tokens move, by Adam on the zero-shot cross-entropy of the bare
    ``[CLASS]`` prompt against the prototypes, with each row held at its
    initial norm.  Everything else keeps its seeded value.  Returns a new
    frozen model.
    """
    proto = np.asarray(prototypes, dtype=np.float64)
    n = model.n_classes
    if proto.shape != (n, model.w1.shape[0]):
        raise ValueError(f"prototypes must be ({n}, {model.w1.shape[0]}), got {proto.shape}")
    rows = np.array(model.class_embeddings)
    radius = np.linalg.norm(rows, axis=1, keepdims=True)
    zv = encode_image(model, proto)
    labels = np.arange(n)
    m1 = np.zeros_like(rows)
    m2 = np.zeros_like(rows)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(1, steps + 1):
        g = DiffGraph()
        c = g.leaf(rows, requires_grad=True)
        seqs = [g.slice(c, slice(j, j + 1)) for j in range(n)]
        loss = g.cross_entropy(
            logits_graph(g, model, g.leaf(zv), text_encoder_graph(g, model, seqs)), labels)
        g.forward()
        grad = g.backward(loss)[c]
        m1 = b1 * m1 + (1 - b1) * grad
        m2 = b2 * m2 + (1 - b2) * grad * grad
        rows = rows - lr * (m1 / (1 - b1**step)) / (np.sqrt(m2 / (1 - b2**step)) + eps)
        rows *= radius / np.linalg.norm(rows, axis=1, keepdims=True)
    vocab = np.array(model.vocab)
    vocab[:n] = rows
    return model.with_vocab(vocab)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def save_model(model: DualEncoderModel, path) -> None:
    dx, h, d, v, c = model.dims
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<5I", dx, h, d, v, c))
        for name in _WEIGHTS:
            f.write(getattr(model, name).astype("<f8").tobytes())
        f.write(struct.pack("<d", model.tau))


def load_model(path) -> DualEncoderModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported model format version {version}")
    dx, h, d, v, c = struct.unpack_from("<5I", raw, 6)
    shapes = {
        "w1": (dx, h), "b1": (h,), "w2": (h, d), "b2": (d,), "w3": (d, h),
        "b3": (h,), "w4": (h, d), "b4": (d,), "vocab": (v, d),
    }
    off = 26
    arrays = {}
    for name in _WEIGHTS:
        count = int(np.prod(shapes[name]))
        if off + 8 * count > len(raw):
            raise CheckpointError(f"{path}: truncated at {name}")
        arrays[name] = np.frombuffer(raw, "<f8", count, off).reshape(shapes[name]).copy()
        off += 8 * count
    if off + 8 != len(raw):
        raise CheckpointError(f"{path}: size mismatch")
    (tau,) = struct.unpack_from("<d", raw, off)
    return DualEncoderModel(**arrays, n_classes=c, tau=tau)
