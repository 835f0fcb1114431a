"""Adversarial prompt tuning of context vectors against a frozen model."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attack import AttackSpec, attack, example_losses
from .autodiff import DiffGraph
from .model import (DualEncoderModel, count_passes, encode_image, encode_text, cosine_logits,
                    image_encoder_graph, logits_graph, text_encoder_graph, uncounted)
from .prompt import HandPrompt, PromptContext, context_sequences, default_prompt, hand_tokens

STRATEGIES = ("constant", "on-the-fly", "perturbed")
HISTORY_FIELDS = ("epoch", "lr", "train_loss", "clean_acc", "robust_acc")
CONFIG_KEYS = ("strategy", "epochs", "batch_size", "lr", "eps", "k", "alpha",
               "alpha_prime", "m", "mode", "position", "seed", "shots")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "on-the-fly"
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.002
    attack: AttackSpec = field(default_factory=AttackSpec.training)
    seed: int = 0
    anchor: HandPrompt | None = None
    mode: str = "uc"
    m: int = 16
    position: str = "end"
    shots: int = 16

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr >= 0 required")
        if self.strategy == "perturbed" and not (
                self.attack.perturb_text and self.attack.alpha_text is not None):
            raise ConfigError("perturbed strategy needs a text-perturbing attack with alpha_prime")
        if self.strategy != "perturbed" and self.attack.perturb_text:
            raise ConfigError(f"{self.strategy} strategy must not perturb the prompt")
        if (self.anchor is not None) != (self.strategy == "constant"):
            raise ConfigError("an anchor prompt is required for, and only for, the constant strategy")

    @classmethod
    def build(cls, strategy="on-the-fly", eps=4 / 255, alpha_prime=None, vocab_size=64,
              n_classes=8, **kw) -> "TrainConfig":
        """Config with the training adversary and anchor filled in for ``strategy``."""
        perturbed = strategy == "perturbed"
        spec = AttackSpec.training(eps, perturb_text=perturbed,
                                   alpha_text=(alpha_prime or 0.01) if perturbed else None,
                                   seed=kw.get("seed", 0))
        if "k" in kw or "alpha" in kw:
            spec = replace(spec, steps=kw.pop("k", spec.steps), alpha=kw.pop("alpha", spec.alpha))
        anchor = default_prompt(vocab_size, n_classes) if strategy == "constant" else None
        return cls(strategy=strategy, attack=spec, anchor=anchor, **kw)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy, "epochs": self.epochs, "batch_size": self.batch_size,
            "lr": self.lr, "eps": self.attack.eps, "k": self.attack.steps,
            "alpha": self.attack.alpha, "alpha_prime": self.attack.alpha_text,
            "m": self.m, "mode": self.mode, "position": self.position, "seed": self.seed,
            "shots": self.shots,
        }


def load_config(path, vocab_size=64, n_classes=8) -> TrainConfig:
    """Read a JSON training config using the keys in :data:`CONFIG_KEYS`."""
    raw = json.loads(Path(path).read_text())
    return config_from_dict(raw, vocab_size, n_classes)


def config_from_dict(raw: dict, vocab_size=64, n_classes=8) -> TrainConfig:
    unknown = set(raw) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = {k: raw[k] for k in ("epochs", "batch_size", "lr", "m", "mode", "position",
                              "seed", "shots", "k", "alpha") if raw.get(k) is not None}
    return TrainConfig.build(strategy=raw.get("strategy", "on-the-fly"),
                             eps=raw.get("eps", 4 / 255), alpha_prime=raw.get("alpha_prime"),
                             vocab_size=vocab_size, n_classes=n_classes, **kw)


class PerturbationCache:
    """Per-example perturbations for the constant strategy, written once."""

    def __init__(self, model: DualEncoderModel, anchor: HandPrompt):
        self.anchor = anchor
        self.tokens = hand_tokens(model, anchor)
        self.text_features = encode_text(model, self.tokens)
        self._delta: dict[int, np.ndarray] = {}

    def __contains__(self, idx) -> bool:
        return int(idx) in self._delta

    def __len__(self):
        return len(self._delta)

    def get(self, idx) -> np.ndarray:
        return self._delta[int(idx)]

    def put(self, idx, delta) -> None:
        idx = int(idx)
        if idx in self._delta:
            raise KeyError(f"perturbation for example {idx} already cached")
        arr = np.array(delta)
        arr.flags.writeable = False
        self._delta[idx] = arr


def cosine_lr(lr0: float, step: int, total: int) -> float:
    return lr0 * (1.0 + math.cos(math.pi * step / total)) / 2.0 if total > 0 else lr0


def _adversarial_images(ctx, model, x, y, ids, config, cache, tokens, feats):
    spec = config.attack
    if spec.eps == 0:
        return x
    if config.strategy == "constant":
        todo = [k for k, i in enumerate(ids) if i not in cache]
        if todo:
            adv = attack(model, x[todo], y[todo], cache.tokens, spec,
                         text_features=cache.text_features, compute_loss=False)
            for k, d in zip(todo, adv.perturbation):
                cache.put(ids[k], d)
        delta = np.stack([cache.get(i) for i in ids])
        return np.clip(x + delta, 0.0, 1.0)
    if config.strategy == "on-the-fly":
        return attack(model, x, y, tokens, spec, text_features=feats, compute_loss=False).images
    return attack(model, x, y, tokens, spec, compute_loss=False).images


def train_one_iteration(ctx: PromptContext, model: DualEncoderModel, x, y, ids,
                        config: TrainConfig, cache: PerturbationCache | None = None,
                        lr: float | None = None) -> dict:
    """One APT step on a batch; updates ``ctx.vectors`` in place.

    ``ids`` are dataset indices of the batch rows, used as cache keys.
    Returns the adversarial loss and accuracy on the batch and the images
    the update was computed on.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if ctx.class_embeddings.shape != model.class_embeddings.shape or ctx.dim != model.embed_dim:
        raise ValueError("context does not match model dimensions")
    if config.strategy == "constant":
        if cache is None:
            raise ValueError("constant strategy needs a PerturbationCache")
    elif cache is not None:
        raise ValueError(f"a perturbation cache is only valid for the constant strategy")
    lr = config.lr if lr is None else lr

    g = DiffGraph()
    vec = g.leaf(ctx.vectors, requires_grad=True)
    feats = text_encoder_graph(g, model, context_sequences(g, ctx, vec))
    text_features = g.forward(feats)
    tokens = ctx.tokens()

    x_adv = _adversarial_images(ctx, model, x, y, list(ids), config, cache, tokens, text_features)

    img = image_encoder_graph(g, model, g.leaf(x_adv))
    logits = logits_graph(g, model, img, feats)
    loss = g.cross_entropy(logits, y)
    g.forward()
    grad = g.backward(loss)[vec]
    ctx.vectors -= lr * grad
    acc = float(np.mean(np.argmax(g.value(logits), axis=1) == y))
    return {"loss": float(g.value(loss)), "adv_acc": acc, "lr": lr, "images": x_adv}


def _epoch_metrics(ctx, model, x, y, spec):
    with uncounted():
        tokens = ctx.tokens()
        t = encode_text(model, tokens)
        clean = float(np.mean(np.argmax(cosine_logits(model, encode_image(model, x), t), 1) == y))
        if spec.eps == 0:
            return clean, clean
        adv = attack(model, x, y, tokens, replace(spec, perturb_text=False, alpha_text=None),
                     text_features=t, compute_loss=False)
        rob = float(np.mean(np.argmax(cosine_logits(model, encode_image(model, adv.images), t), 1) == y))
    return clean, rob


def train(ctx: PromptContext, model: DualEncoderModel, x, y, config: TrainConfig,
          ids=None, callback=None):
    """Run ``epochs * ceil(N / batch_size)`` iterations of APT.

    Returns ``(context, history)``; ``history`` has one dict per epoch with
    the keys in :data:`HISTORY_FIELDS`.  ``clean_acc`` and ``robust_acc`` are
    measured on the training examples with the training adversary.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    ctx = ctx.copy()
    cache = PerturbationCache(model, config.anchor) if config.strategy == "constant" else None
    rng = np.random.default_rng(config.seed)
    per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * per_epoch
    step = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        lr_first = cosine_lr(config.lr, step, total)
        for b in range(per_epoch):
            sel = order[b * config.batch_size:(b + 1) * config.batch_size]
            lr = cosine_lr(config.lr, step, total)
            out = train_one_iteration(ctx, model, x[sel], y[sel], ids[sel], config, cache, lr)
            if callback is not None:
                callback(epoch, step, sel, out)
            losses.append(out["loss"] * len(sel))
            step += 1
        clean, rob = _epoch_metrics(ctx, model, x, y, config.attack)
        history.append({"epoch": epoch, "lr": lr_first, "train_loss": sum(losses) / n,
                        "clean_acc": clean, "robust_acc": rob})
    return ctx, history


def write_history(history, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()
                        if k in HISTORY_FIELDS})


@dataclass(frozen=True)
class CostReport:
    """Predicted encoder passes (whole-batch units).

    ``first_epoch`` and ``later_epoch`` are per-iteration counts; ``setup``
    is paid once per run; ``total`` covers the whole run.
    """

    setup: dict
    first_epoch: dict
    later_epoch: dict
    total: dict


def cost_report(config: TrainConfig, n_examples: int) -> CostReport:
    k = config.attack.steps
    keys = ("image_fwd", "image_bwd", "text_fwd", "text_bwd")
    update = {"image_fwd": 1, "image_bwd": 0, "text_fwd": 1, "text_bwd": 1}
    setup = dict.fromkeys(keys, 0)
    adv = dict.fromkeys(keys, 0)
    if config.attack.eps > 0:
        adv["image_fwd"] = adv["image_bwd"] = k
        if config.strategy == "perturbed":
            adv["text_fwd"] = adv["text_bwd"] = k
    if config.strategy == "constant":
        setup["text_fwd"] = 1  # anchor prompt features, reused by every cached attack
    first = {key: update[key] + adv[key] for key in keys}
    later = dict(first) if config.strategy != "constant" else dict(update)
    per_epoch = math.ceil(n_examples / config.batch_size)
    e = config.epochs
    total = {key: setup[key] + (first[key] + (e - 1) * later[key]) * per_epoch if e else setup[key]
             for key in keys}
    return CostReport(setup, first, later, total)


def measure_cost(ctx, model, x, y, config: TrainConfig):
    """Run :func:`train` under pass counters; returns (per-iteration list, total)."""
    per_iter = []
    last = {}

    def cb(epoch, step, sel, out):
        per_iter.append({k: counts[k] - last.get(k, 0) for k in counts})
        last.update(counts)

    with count_passes() as counts:
        train(ctx, model, x, y, config, callback=cb)
    return per_iter, dict(counts)
