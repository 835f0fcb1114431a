"""Prompt-conditioned l-inf PGD against the dual encoder.

The image side of every step runs through :mod:`aptlab.kernels` (a fused
encoder forward/backward).  When the prompt is perturbed jointly, the text
encoder runs on a :class:`~aptlab.autodiff.DiffGraph` so that the gradient
reaches the token vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import DiffGraph
from .model import (DualEncoderModel, bump, encode_image, encode_text, cosine_logits,
                    text_encoder_graph)


@dataclass(frozen=True)
class AttackSpec:
    eps: float
    steps: int
    alpha: float
    alpha_text: float | None = None
    perturb_text: bool = False
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.eps >= 0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.perturb_text and self.alpha_text is None:
            raise ValueError("perturb_text requires alpha_text")

    @classmethod
    def evaluation(cls, eps: float = 4 / 255, seed: int = 0) -> "AttackSpec":
        """100 steps of size eps/4 from a random start."""
        return cls(eps=eps, steps=100, alpha=eps / 4 if eps > 0 else 1e-3,
                   random_start=True, seed=seed)

    @classmethod
    def training(cls, eps: float = 4 / 255, perturb_text: bool = False,
                 alpha_text: float | None = None, seed: int = 0) -> "AttackSpec":
        """3 steps of size 2*eps/3, no random start."""
        if perturb_text and alpha_text is None:
            alpha_text = 0.01
        return cls(eps=eps, steps=3, alpha=2 * eps / 3 if eps > 0 else 1e-3,
                   alpha_text=alpha_text, perturb_text=perturb_text,
                   random_start=False, seed=seed)


@dataclass(frozen=True)
class AdversarialBatch:
    images: np.ndarray
    perturbation: np.ndarray  # images - clean input, exactly within [-eps, eps]
    losses: np.ndarray | None  # per-example loss at ``images`` (None if not computed)

    @property
    def loss(self) -> float:
        return float(np.mean(self.losses))


def _exact_project(x, x_adv, eps):
    """Nudge ``x_adv`` by ulps so that ``|x_adv - x| <= eps`` holds in float."""
    d = x_adv - x
    over = d > eps
    while np.any(over):
        x_adv[over] = np.nextafter(x_adv[over], -np.inf)
        d = x_adv - x
        over = d > eps
    under = d < -eps
    while np.any(under):
        x_adv[under] = np.nextafter(x_adv[under], np.inf)
        d = x_adv - x
        under = d < -eps
    return x_adv, d


class TextGradient:
    """Reusable text-encoder graph mapping a feature gradient to token vectors.

    Call :meth:`features` with the current tokens, then :meth:`token_grad`
    with dL/d(text features) to pull it back through the encoder.
    """

    def __init__(self, model: DualEncoderModel, tokens):
        g = DiffGraph()
        self._tok = g.leaf(tokens, requires_grad=True)
        self._feats = text_encoder_graph(g, model, [g.slice(self._tok, j)
                                                    for j in range(model.n_classes)])
        self._up = g.leaf(np.zeros((model.n_classes, model.embed_dim)))
        self._surrogate = g.dot(self._feats, self._up)
        self._g = g

    def features(self, tokens) -> np.ndarray:
        self._g.set_value(self._tok, tokens)
        return self._g.forward(self._feats)

    def token_grad(self, feature_grad) -> np.ndarray:
        self._g.set_value(self._up, feature_grad)
        self._g.forward(self._surrogate)
        return self._g.backward(self._surrogate)[self._tok]


def example_losses(model: DualEncoderModel, images, labels, text_features) -> np.ndarray:
    """Per-example cross-entropy of the cosine logits (one image forward)."""
    s = cosine_logits(model, encode_image(model, images), text_features)
    mx = s.max(axis=1, keepdims=True)
    lse = np.log(np.exp(s - mx).sum(axis=1)) + mx[:, 0]
    return lse - s[np.arange(len(labels)), labels]


def attack(model: DualEncoderModel, images, labels, prompt_tokens, spec: AttackSpec,
           text_features=None, compute_loss: bool = True) -> AdversarialBatch:
    """Maximize cross-entropy under ``prompt_tokens`` within the eps-ball.

    ``prompt_tokens`` is a (C, L, d) stack, one sequence per class.  When the
    prompt is not perturbed, precomputed ``text_features`` may be passed to
    skip the text forward pass.  The text perturbation, if any, is local to
    this call and discarded.
    """
    x = np.ascontiguousarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"images {x.shape} do not match {y.shape[0]} labels")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    tokens = np.array(prompt_tokens, dtype=np.float64)
    if tokens.ndim != 3 or tokens.shape[0] != model.n_classes:
        raise ValueError(f"need a (C={model.n_classes}, L, d) prompt stack, got {tokens.shape}")
    rng = np.random.default_rng(spec.seed)
    if spec.random_start and spec.eps > 0:
        delta = rng.uniform(-spec.eps, spec.eps, x.shape)
    else:
        delta = np.zeros_like(x)
    x_adv = np.clip(x + delta, 0.0, 1.0)

    if spec.perturb_text:
        text = TextGradient(model, tokens)
        delta_text = np.zeros_like(tokens)
    elif text_features is None:
        text_features = encode_text(model, tokens)

    inv_tau = 1.0 / model.tau
    for _ in range(spec.steps):
        if spec.perturb_text:
            text_features = text.features(tokens + delta_text)
        _, grad_x, grad_t = kernels.image_loss_grad(
            x_adv, model.w1, model.b1, model.w2, model.b2, text_features, inv_tau, y)
        bump("image_fwd")
        bump("image_bwd")
        x_adv = kernels.pgd_step(x, delta, grad_x, spec.alpha, spec.eps)
        if spec.perturb_text:
            delta_text += spec.alpha_text * text.token_grad(grad_t)

    x_adv, applied = _exact_project(x, x_adv, spec.eps)
    losses = None
    if compute_loss:
        if spec.perturb_text or text_features is None:
            text_features = encode_text(model, tokens)
        losses = example_losses(model, x_adv, y, text_features)
    return AdversarialBatch(x_adv, applied, losses)


def pgd(images, spec: AttackSpec, input_grad) -> AdversarialBatch:
    """Signed-gradient ascent for an arbitrary differentiable pipeline.

    ``input_grad(x_adv)`` returns the per-example loss gradient with respect
    to the images.  Text perturbation is not supported here.
    """
    if spec.perturb_text:
        raise ValueError("generic PGD cannot perturb a prompt")
    x = np.ascontiguousarray(images, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"need a nonempty (B, dx) batch, got {x.shape}")
    rng = np.random.default_rng(spec.seed)
    if spec.random_start and spec.eps > 0:
        delta = rng.uniform(-spec.eps, spec.eps, x.shape)
    else:
        delta = np.zeros_like(x)
    x_adv = np.clip(x + delta, 0.0, 1.0)
    for _ in range(spec.steps):
        grad = np.ascontiguousarray(input_grad(x_adv), dtype=np.float64)
        x_adv = kernels.pgd_step(x, delta, grad, spec.alpha, spec.eps)
    x_adv, applied = _exact_project(x, x_adv, spec.eps)
    return AdversarialBatch(x_adv, applied, None)


def robust_accuracy(model: DualEncoderModel, images, labels, inference_tokens,
                    attack_tokens, spec: AttackSpec, return_predictions: bool = False):
    """Accuracy under ``inference_tokens`` on examples attacked with ``attack_tokens``."""
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    t_inf = encode_text(model, inference_tokens)
    t_att = t_inf if attack_tokens is inference_tokens else None
    adv = attack(model, x, y, attack_tokens, spec, text_features=t_att, compute_loss=False)
    pred = np.argmax(cosine_logits(model, encode_image(model, adv.images), t_inf), axis=1)
    acc = float(np.mean(pred == y))
    return (acc, pred) if return_predictions else acc
