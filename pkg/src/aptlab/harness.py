"""Experiment orchestration over seeded toy labs.

A *lab* is one frozen grounded model plus one synthetic dataset, both
derived from an integer seed.  Every experiment here is a pure function of
its config and seed list, so report files can be compared byte-for-byte.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attack import AttackSpec, attack
from .baselines import (NotApplicableError, OptimConfig, avp_accuracy, check_applicable,
                        paft_accuracy, train_avp, train_paft)
from .data import Dataset, SyntheticSpec, generate, sample_shots, shift
from .model import DualEncoderModel, cosine_logits, encode_image, encode_text, ground_class_tokens
from .prompt import PromptContext, default_prompt, hand_tokens, init_context, probe_prompts
from .training import TrainConfig, train

EVAL_ATTACK_SEED = 7


def max_workers() -> int:
    """Parallelism cap from ``APT_LAB_THREADS`` (default 1)."""
    raw = os.environ.get("APT_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"APT_LAB_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _map(fn, items):
    items = list(items)
    n = min(max_workers(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# lab
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabConfig:
    """Toy world and training budget shared by all experiments."""

    n_classes: int = 8
    dx: int = 64
    hidden: int = 64
    dim: int = 32
    vocab_size: int = 64
    separation: float = 0.5
    sigma: float = 0.08
    per_class: int = 64
    ground_steps: int = 150
    ground_lr: float = 0.05
    eps: float = 4 / 255
    m: int = 16
    position: str = "end"
    lr: float = 0.3
    batch_size: int = 32
    epochs: dict = field(default_factory=lambda: {1: 50, 4: 100, 16: 200})
    avp_lr: float = 0.3
    paft_lr: float = 0.1
    eval_steps: int = 100

    def epochs_for(self, shots: int) -> int:
        below = [k for k in self.epochs if k <= shots]
        return self.epochs[max(below) if below else min(self.epochs)]

    def eval_spec(self) -> AttackSpec:
        return AttackSpec(eps=self.eps, steps=self.eval_steps,
                          alpha=self.eps / 4 if self.eps > 0 else 1e-3,
                          random_start=True, seed=EVAL_ATTACK_SEED)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = {str(k): v for k, v in sorted(self.epochs.items())}
        return d


@dataclass(frozen=True)
class Lab:
    seed: int
    model: DualEncoderModel
    data: Dataset
    config: LabConfig


def build_lab(seed: int, config: LabConfig = LabConfig()) -> Lab:
    """Seeded model, dataset (seed + 1000) and class-token grounding."""
    model = DualEncoderModel.init(seed, dx=config.dx, h=config.hidden, d=config.dim,
                                  v=config.vocab_size, n_classes=config.n_classes)
    ds = generate(SyntheticSpec(n_classes=config.n_classes, dx=config.dx, sigma=config.sigma,
                                separation=config.separation, train_per_class=config.per_class,
                                test_per_class=config.per_class, vocab_size=config.vocab_size,
                                seed=seed + 1000))
    model = ground_class_tokens(model, ds.class_means, config.ground_steps, config.ground_lr)
    return Lab(seed, model, ds, config)


def apt_config(lab: Lab, shots: int, mode: str, strategy: str = "on-the-fly",
               alpha_prime: float | None = None, eps: float | None = None) -> TrainConfig:
    c = lab.config
    return TrainConfig.build(strategy, eps=c.eps if eps is None else eps,
                             alpha_prime=alpha_prime, vocab_size=c.vocab_size,
                             n_classes=c.n_classes, epochs=c.epochs_for(shots),
                             batch_size=c.batch_size, lr=c.lr, seed=lab.seed, mode=mode,
                             m=c.m, position=c.position, shots=shots)


def train_apt(lab: Lab, config: TrainConfig) -> tuple[PromptContext, list]:
    idx = sample_shots(lab.data, config.shots, lab.seed).indices
    ctx = init_context(config.mode, config.m, lab.config.n_classes, lab.config.dim, lab.seed,
                       lab.model.class_embeddings, config.position)
    return train(ctx, lab.model, lab.data.train_x[idx], lab.data.train_y[idx], config, ids=idx)


@dataclass(frozen=True)
class EvalResult:
    clean_acc: float
    robust_acc: float
    clean_pred: np.ndarray
    adv_pred: np.ndarray
    labels: np.ndarray

    def metrics(self) -> dict:
        return {"clean_acc": self.clean_acc, "robust_acc": self.robust_acc}


def evaluate_tokens(model, tokens, x, y, spec: AttackSpec) -> EvalResult:
    """Clean and white-box robust accuracy of a (C, L, d) prompt stack."""
    y = np.asarray(y, dtype=np.intp)
    t = encode_text(model, tokens)
    clean = np.argmax(cosine_logits(model, encode_image(model, x), t), axis=1)
    adv = attack(model, x, y, tokens, spec, text_features=t, compute_loss=False).images
    advp = np.argmax(cosine_logits(model, encode_image(model, adv), t), axis=1)
    return EvalResult(float(np.mean(clean == y)), float(np.mean(advp == y)), clean, advp, y)


def write_predictions(result: EvalResult, path, ids=None) -> None:
    """Tab-separated: example id, true label, clean prediction, adversarial prediction."""
    ids = np.arange(result.labels.size) if ids is None else ids
    with open(path, "w") as f:
        f.write("id\tlabel\tclean_pred\tadv_pred\n")
        for i, y, c, a in zip(ids, result.labels, result.clean_pred, result.adv_pred):
            f.write(f"{int(i)}\t{int(y)}\t{int(c)}\t{int(a)}\n")


def read_predictions(path) -> dict:
    """Recompute accuracies from a prediction log."""
    rows = np.loadtxt(path, dtype=np.int64, skiprows=1, ndmin=2)
    return {"clean_acc": float(np.mean(rows[:, 2] == rows[:, 1])),
            "robust_acc": float(np.mean(rows[:, 3] == rows[:, 1]))}


# ---------------------------------------------------------------------------
# robustness matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RobustnessMatrix:
    rows: tuple  # inference prompt labels
    cols: tuple  # attack prompt labels
    cells: np.ndarray  # (R, C) robust accuracy

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.float64)
        if cells.shape != (len(self.rows), len(self.cols)):
            raise ValueError(f"cells {cells.shape} do not match labels")
        if np.any((cells < 0) | (cells > 1)):
            raise ValueError("robust accuracy outside [0, 1]")
        object.__setattr__(self, "cells", cells)

    @property
    def row_min(self) -> np.ndarray:
        return self.cells.min(axis=1)

    @property
    def relative(self) -> np.ndarray:
        return self.cells - self.row_min[:, None]

    def diagonal_is_row_min(self) -> np.ndarray:
        """Per row: the matched-prompt column attains the row minimum."""
        out = []
        for r, label in enumerate(self.rows):
            c = self.cols.index(label)
            out.append(bool(self.cells[r, c] <= self.row_min[r]))
        return np.array(out)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["inference", "attack", "robust_acc", "relative", "row_min", "matched"])
        rel = self.relative
        for r, rl in enumerate(self.rows):
            for c, cl in enumerate(self.cols):
                w.writerow([rl, cl, repr(float(self.cells[r, c])), repr(float(rel[r, c])),
                            int(self.cells[r, c] <= self.row_min[r]), int(rl == cl)])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "RobustnessMatrix":
        rows, cols, vals = [], [], {}
        for rec in csv.DictReader(io.StringIO(text)):
            if rec["inference"] not in rows:
                rows.append(rec["inference"])
            if rec["attack"] not in cols:
                cols.append(rec["attack"])
            vals[rec["inference"], rec["attack"]] = float(rec["robust_acc"])
        cells = np.array([[vals[r, c] for c in cols] for r in rows])
        return cls(tuple(rows), tuple(cols), cells)

    @classmethod
    def load(cls, path) -> "RobustnessMatrix":
        return cls.from_csv(Path(path).read_text())

    @classmethod
    def mean(cls, mats) -> "RobustnessMatrix":
        mats = list(mats)
        return cls(mats[0].rows, mats[0].cols, np.mean([m.cells for m in mats], axis=0))


def prompt_sensitivity_matrix(model, x, y, prompts, spec: AttackSpec) -> RobustnessMatrix:
    """Robust accuracy for every (inference prompt, attack prompt) pair.

    ``prompts`` is a list of ``(label, tokens)`` with tokens (C, L, d).
    Adversaries are generated once per attack prompt and scored under every
    inference prompt.
    """
    prompts = list(prompts)
    if not prompts:
        raise ValueError("empty prompt set")
    y = np.asarray(y, dtype=np.intp)
    feats = [encode_text(model, tok) for _, tok in prompts]

    def column(c):
        adv = attack(model, x, y, prompts[c][1], spec, text_features=feats[c],
                     compute_loss=False).images
        zv = encode_image(model, adv)
        return [float(np.mean(np.argmax(cosine_logits(model, zv, t), axis=1) == y)) for t in feats]

    cols = _map(column, range(len(prompts)))
    labels = tuple(label for label, _ in prompts)
    return RobustnessMatrix(labels, labels, np.array(cols).T)


def probe_set(model, seed: int = 0):
    """The six probe prompts as ``(label, tokens)`` pairs."""
    v, c = model.vocab.shape[0], model.n_classes
    return [(p.label, hand_tokens(model, p)) for p in probe_prompts(v, c, seed)]


def transfer_eval(model, ctx: PromptContext, probes, x, y, spec: AttackSpec) -> dict:
    """Robustness of ``ctx`` against adversaries crafted under each probe prompt."""
    y = np.asarray(y, dtype=np.intp)
    tokens = ctx.tokens()
    t = encode_text(model, tokens)

    def score(attack_tokens):
        adv = attack(model, x, y, attack_tokens, spec, compute_loss=False).images
        return float(np.mean(np.argmax(cosine_logits(model, encode_image(model, adv), t), 1) == y))

    probes = list(probes)
    vals = _map(score, [tokens] + [tok for _, tok in probes])
    return {"matched": vals[0], "transfer": {label: v for (label, _), v in zip(probes, vals[1:])}}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    """Per-seed metrics with mean and sample sd; deterministic content only."""

    name: str
    config: dict
    seeds: list
    per_seed: dict  # cell key -> list of metric dicts, aligned with seeds

    def summary(self) -> dict:
        out = {}
        for key, runs in self.per_seed.items():
            stats = {}
            for metric in runs[0]:
                vals = np.array([r[metric] for r in runs], dtype=np.float64)
                sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                stats[metric] = {"mean": float(vals.mean()), "sd": sd}
            out[key] = stats
        return out

    def mean(self, key: str, metric: str = "robust_acc") -> float:
        return self.summary()[key][metric]["mean"]

    def to_dict(self) -> dict:
        return {"name": self.name, "config": self.config, "seeds": list(self.seeds),
                "per_seed": self.per_seed, "summary": self.summary()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        d = json.loads(Path(path).read_text())
        return cls(d["name"], d["config"], d["seeds"], d["per_seed"])

    def table(self) -> str:
        lines = [f"{'cell':<28} {'clean':>14} {'robust':>14}"]
        for key, s in self.summary().items():
            c, r = s["clean_acc"], s["robust_acc"]
            lines.append(f"{key:<28} {c['mean']:.3f}+-{c['sd']:.3f}  {r['mean']:.3f}+-{r['sd']:.3f}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def run_method(lab: Lab, method: str, shots: int) -> EvalResult | dict:
    """Train (if needed) and evaluate one method on one lab; returns metrics."""
    check_applicable(method, novel_classes=False)
    c = lab.config
    spec = c.eval_spec()
    x, y = lab.data.test_x, lab.data.test_y
    prompt = default_prompt(c.vocab_size, c.n_classes)
    if method == "hep":
        return evaluate_tokens(lab.model, hand_tokens(lab.model, prompt), x, y, spec).metrics()
    idx = sample_shots(lab.data, shots, lab.seed).indices
    xs, ys = lab.data.train_x[idx], lab.data.train_y[idx]
    opt_epochs = c.epochs_for(shots)
    train_spec = AttackSpec.training(c.eps, seed=lab.seed)
    if method in ("apt-uc", "apt-csc"):
        ctx, _ = train_apt(lab, apt_config(lab, shots, method[4:]))
        return evaluate_tokens(lab.model, ctx.tokens(), x, y, spec).metrics()
    if method == "avp":
        vp = train_avp(lab.model, xs, ys, prompt, train_spec,
                       OptimConfig(opt_epochs, c.batch_size, c.avp_lr, lab.seed))
        return {"clean_acc": avp_accuracy(lab.model, vp, x, y, prompt),
                "robust_acc": avp_accuracy(lab.model, vp, x, y, prompt, spec)}
    head = train_paft(lab.model, xs, ys, train_spec,
                      OptimConfig(opt_epochs, c.batch_size, c.paft_lr, lab.seed))
    return {"clean_acc": paft_accuracy(lab.model, head, x, y),
            "robust_acc": paft_accuracy(lab.model, head, x, y, spec)}


def shot_sweep(methods, shots, seeds, config: LabConfig = LabConfig()) -> ExperimentReport:
    """Table-style sweep: every (method, shots) cell over every seed."""
    shots = list(shots)
    if not shots or any(s < 1 for s in shots):
        raise ValueError(f"shots must be positive, got {shots}")
    methods = list(methods)
    for m in methods:
        check_applicable(m, novel_classes=False)
    seeds = list(seeds)
    labs = _map(lambda s: build_lab(s, config), seeds)
    cells = [(m, n) for m in methods for n in shots]
    per_seed = {}
    for m, n in cells:
        # no training for the hand prompt, so its result is copied across shots
        if m == "hep" and any(k.startswith("hep/") for k in per_seed):
            per_seed[f"hep/{n}"] = per_seed[next(k for k in per_seed if k.startswith("hep/"))]
            continue
        per_seed[f"{m}/{n}"] = _map(lambda lab: run_method(lab, m, n), labs)
    return ExperimentReport("shot-sweep", {"lab": config.to_dict(), "methods": methods,
                                           "shots": shots}, seeds, per_seed)


def shift_eval(lab: Lab, artifacts: dict, target: Dataset, novel_classes: bool = False) -> dict:
    """Evaluate source-trained artifacts on a shifted test set.

    ``artifacts`` maps method name to a trained object: a PromptContext for
    ``apt-uc``/``apt-csc``, a VisualPrompt for ``avp``, a LinearHead for
    ``paft`` and None for ``hep``.  Closed-set methods on a
    novel-class target yield a structured N/A entry instead of metrics.
    """
    spec = lab.config.eval_spec()
    out = {}
    for method, art in artifacts.items():
        try:
            check_applicable(method, novel_classes, target="novel-class target")
        except NotApplicableError as e:
            out[method] = e.to_dict()
            continue
        x, y = target.test_x, target.test_y
        prompt = default_prompt(lab.config.vocab_size, lab.config.n_classes)
        if art is None and method != "hep":
            raise ValueError(f"no trained artifact for {method!r}")
        if method == "avp":
            out[method] = {"clean_acc": avp_accuracy(lab.model, art, x, y, prompt),
                           "robust_acc": avp_accuracy(lab.model, art, x, y, prompt, spec)}
        elif method == "paft":
            out[method] = {"clean_acc": paft_accuracy(lab.model, art, x, y),
                           "robust_acc": paft_accuracy(lab.model, art, x, y, spec)}
        else:
            tok = hand_tokens(lab.model, prompt) if method == "hep" else art.tokens()
            out[method] = evaluate_tokens(lab.model, tok, x, y, spec).metrics()
    return out


def mild_shift(lab: Lab, offset: float = 0.1, noise_mult: float = 1.25) -> Dataset:
    return shift(lab.data, offset, noise_mult)
