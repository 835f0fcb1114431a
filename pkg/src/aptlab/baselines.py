"""Comparison methods: additive visual prompting (AVP), a robust linear head
on the image encoder (PAFT) and clean prompt tuning.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels
from .attack import AttackSpec, attack, pgd
from .autodiff import DiffGraph
from .model import (DualEncoderModel, bump, cosine_logits, encode_image, encode_text,
                    image_encoder_graph, logits_graph)
from .prompt import HandPrompt, PromptContext, hand_tokens
from .training import TrainConfig, cosine_lr, train

VISUAL_MAGIC = b"APTV"
HEAD_MAGIC = b"APTL"
VERSION = 1

METHODS = ("hep", "apt-uc", "apt-csc", "avp", "paft")
# methods whose parameters are tied to the training label set
CLOSED_SET = frozenset({"apt-csc", "paft"})


class NotApplicableError(ValueError):
    """A method cannot be evaluated on the requested target by design."""

    def __init__(self, method: str, target: str, reason: str):
        self.method = method
        self.target = target
        self.reason = reason
        super().__init__(f"N/A: {method} on {target}: {reason}")

    def to_dict(self) -> dict:
        return {"status": "N/A", "method": self.method, "target": self.target,
                "reason": self.reason}


def check_applicable(method: str, novel_classes: bool, target: str = "target") -> None:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if novel_classes and method in CLOSED_SET:
        raise NotApplicableError(method, target, "parameters are specific to the source classes")


@dataclass(frozen=True)
class OptimConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr >= 0 required")


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for b in range(math.ceil(n / batch_size)):
        yield order[b * batch_size:(b + 1) * batch_size]


# ---------------------------------------------------------------------------
# AVP
# ---------------------------------------------------------------------------


@dataclass
class VisualPrompt:
    phi: np.ndarray  # (dx,)

    @classmethod
    def zeros(cls, dx: int) -> "VisualPrompt":
        return cls(np.zeros(dx))

    def apply(self, images) -> np.ndarray:
        return np.clip(np.asarray(images, dtype=np.float64) + self.phi, 0.0, 1.0)

    @property
    def n_params(self) -> int:
        return self.phi.size


def avp_loss_graph(model, x, x_adv, phi, text_features, labels):
    """Joint clean + adversarial loss of the prompted images.

    Returns ``(graph, phi_leaf, loss_node)``.
    """
    g = DiffGraph()
    p = g.leaf(phi, requires_grad=True)
    t = g.leaf(text_features)
    losses = []
    for imgs in (x, x_adv):
        prompted = g.clamp(g.add(g.leaf(imgs), p), 0.0, 1.0)
        logits = logits_graph(g, model, image_encoder_graph(g, model, prompted), t)
        losses.append(g.cross_entropy(logits, labels))
    loss = g.add(*losses)
    return g, p, loss


def train_avp(model: DualEncoderModel, x, y, prompt: HandPrompt, spec: AttackSpec,
              opt: OptimConfig) -> VisualPrompt:
    """SGD (cosine schedule) on L(x + phi) + L(x + delta + phi).

    ``delta`` is generated on the un-prompted image under the fixed hand
    prompt, so it does not depend on ``phi``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    tokens = hand_tokens(model, prompt)
    t = encode_text(model, tokens)
    vp = VisualPrompt.zeros(x.shape[1])
    rng = np.random.default_rng(opt.seed)
    total = opt.epochs * math.ceil(x.shape[0] / opt.batch_size)
    step = 0
    for _ in range(opt.epochs):
        for sel in _batches(x.shape[0], opt.batch_size, rng):
            xb, yb = x[sel], y[sel]
            x_adv = attack(model, xb, yb, tokens, spec, text_features=t, compute_loss=False).images
            g, p, loss = avp_loss_graph(model, xb, x_adv, vp.phi, t, yb)
            g.forward()
            vp.phi = vp.phi - cosine_lr(opt.lr, step, total) * g.backward(loss)[p]
            step += 1
    return vp


def avp_attack(model, vp: VisualPrompt, images, labels, text_features, spec: AttackSpec):
    """White-box PGD through the visual prompt."""
    y = np.asarray(labels, dtype=np.intp)
    t = np.asarray(text_features, dtype=np.float64)

    def grad(x_adv):
        raw = x_adv + vp.phi
        _, gx, _ = kernels.image_loss_grad(np.clip(raw, 0.0, 1.0), model.w1, model.b1,
                                           model.w2, model.b2, t, 1.0 / model.tau, y)
        bump("image_fwd")
        bump("image_bwd")
        return gx * ((raw >= 0.0) & (raw <= 1.0))

    return pgd(images, spec, grad)


def avp_accuracy(model, vp: VisualPrompt, images, labels, prompt: HandPrompt,
                 spec: AttackSpec | None = None, return_predictions=False):
    """Clean accuracy, or robust accuracy when ``spec`` is given."""
    y = np.asarray(labels, dtype=np.intp)
    t = encode_text(model, hand_tokens(model, prompt))
    x = np.asarray(images, dtype=np.float64)
    if spec is not None:
        x = avp_attack(model, vp, x, y, t, spec).images
    pred = np.argmax(cosine_logits(model, encode_image(model, vp.apply(x)), t), axis=1)
    acc = float(np.mean(pred == y))
    return (acc, pred) if return_predictions else acc


def save_visual_prompt(vp: VisualPrompt, path) -> None:
    with open(path, "wb") as f:
        f.write(VISUAL_MAGIC)
        f.write(struct.pack("<HI", VERSION, vp.phi.size))
        f.write(vp.phi.astype("<f8").tobytes())


def load_visual_prompt(path) -> VisualPrompt:
    raw = Path(path).read_bytes()
    if raw[:4] != VISUAL_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {VISUAL_MAGIC!r}")
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != VERSION or len(raw) != 10 + 8 * n:
        raise ValueError(f"{path}: unsupported version or size mismatch")
    return VisualPrompt(np.frombuffer(raw, "<f8", n, 10).copy())


# ---------------------------------------------------------------------------
# PAFT
# ---------------------------------------------------------------------------


@dataclass
class LinearHead:
    weight: np.ndarray  # (C, d)
    bias: np.ndarray  # (C,)

    @classmethod
    def zeros(cls, n_classes: int, dim: int) -> "LinearHead":
        return cls(np.zeros((n_classes, dim)), np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, model, images) -> np.ndarray:
        return encode_image(model, images) @ self.weight.T + self.bias


def head_input_grad(model, head: LinearHead, images, labels) -> np.ndarray:
    """d(per-example CE of encoder + head)/d(images)."""
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    hid = np.tanh(x @ model.w1 + model.b1)
    z = hid @ model.w2 + model.b2
    s = z @ head.weight.T + head.bias
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1.0
    bump("image_fwd")
    bump("image_bwd")
    return (((p @ head.weight) @ model.w2.T) * (1.0 - hid * hid)) @ model.w1.T


def head_loss_graph(features, head: LinearHead, labels):
    """Mean CE of ``features @ W.T + b``; returns (graph, wt_leaf, b_leaf, loss)."""
    g = DiffGraph()
    wt = g.leaf(head.weight.T, requires_grad=True)
    b = g.leaf(head.bias, requires_grad=True)
    loss = g.cross_entropy(g.add(g.matmul(g.leaf(features), wt), b), labels)
    return g, wt, b, loss


def paft_lr(lr0: float, epoch: int, epochs: int) -> float:
    """Step decay by 0.1 at 1/4 and again at 1/2 of the epochs."""
    k = sum(epoch >= m for m in (epochs // 4, epochs // 2) if m > 0)
    return lr0 * 0.1 ** k


def paft_attack(model, head: LinearHead, images, labels, spec: AttackSpec):
    y = np.asarray(labels, dtype=np.intp)
    return pgd(images, spec, lambda xa: head_input_grad(model, head, xa, y))


def train_paft(model: DualEncoderModel, x, y, spec: AttackSpec, opt: OptimConfig,
               n_classes: int | None = None) -> LinearHead:
    """Adversarially train a linear head on frozen image features.

    The text encoder and prompts play no part.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    head = LinearHead.zeros(n_classes or model.n_classes, model.embed_dim)
    rng = np.random.default_rng(opt.seed)
    for epoch in range(opt.epochs):
        lr = paft_lr(opt.lr, epoch, opt.epochs)
        for sel in _batches(x.shape[0], opt.batch_size, rng):
            x_adv = paft_attack(model, head, x[sel], y[sel], spec).images
            g, wt, b, loss = head_loss_graph(encode_image(model, x_adv), head, y[sel])
            g.forward()
            grads = g.backward(loss)
            head = LinearHead(head.weight - lr * grads[wt].T, head.bias - lr * grads[b])
    return head


def paft_accuracy(model, head: LinearHead, images, labels, spec: AttackSpec | None = None,
                  return_predictions=False):
    y = np.asarray(labels, dtype=np.intp)
    x = np.asarray(images, dtype=np.float64)
    if spec is not None:
        x = paft_attack(model, head, x, y, spec).images
    pred = np.argmax(head.logits(model, x), axis=1)
    acc = float(np.mean(pred == y))
    return (acc, pred) if return_predictions else acc


def save_head(head: LinearHead, path) -> None:
    c, d = head.weight.shape
    with open(path, "wb") as f:
        f.write(HEAD_MAGIC)
        f.write(struct.pack("<H2I", VERSION, c, d))
        f.write(head.weight.astype("<f8").tobytes())
        f.write(head.bias.astype("<f8").tobytes())


def load_head(path) -> LinearHead:
    raw = Path(path).read_bytes()
    if raw[:4] != HEAD_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {HEAD_MAGIC!r}")
    version, c, d = struct.unpack_from("<H2I", raw, 4)
    if version != VERSION or len(raw) != 14 + 8 * (c * d + c):
        raise ValueError(f"{path}: unsupported version or size mismatch")
    w = np.frombuffer(raw, "<f8", c * d, 14).reshape(c, d).copy()
    return LinearHead(w, np.frombuffer(raw, "<f8", c, 14 + 8 * c * d).copy())


# ---------------------------------------------------------------------------
# clean prompt tuning
# ---------------------------------------------------------------------------


def train_standard_prompt(ctx: PromptContext, model: DualEncoderModel, x, y,
                          config: TrainConfig):
    """Prompt tuning on clean images: the APT loop with a zero budget."""
    clean = replace(config, strategy="on-the-fly", anchor=None,
                    attack=replace(config.attack, eps=0.0, perturb_text=False, alpha_text=None))
    return train(ctx, model, x, y, clean)
