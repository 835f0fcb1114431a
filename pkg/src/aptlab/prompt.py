"""Prompts: hand-written token templates and learnable soft contexts.

Vocabulary layout used throughout the package: rows ``[0, C)`` of the model
vocabulary are class-name tokens, the remaining rows are ordinary words
(see :func:`vocabulary_words`).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DiffGraph

CONTEXT_MAGIC = b"APTC"
CONTEXT_VERSION = 1
MODES = ("uc", "csc")
POSITIONS = ("front", "middle", "end")
CLASS_SLOT = -1

CLASS_NAMES = (
    "ant", "bee", "cat", "dog", "eel", "fox", "gnu", "hen", "ibis", "jay",
    "koi", "lynx", "mole", "newt", "owl", "pig",
)
ENGLISH = (
    "a", "photo", "of", "the", "this", "is", "picture", "an", "image",
    "type", "small", "large", "good", "bright", "dark", "object",
)


def _letter_tokens(n):
    rng = np.random.default_rng(1234)
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    return ["".join(rng.choice(letters, 4)) for _ in range(n)]


def _number_tokens(n):
    rng = np.random.default_rng(4321)
    return [str(v) for v in rng.integers(100, 1000, n)]


def vocabulary_words(vocab_size: int, n_classes: int) -> list[str]:
    """Readable strings for every vocabulary row."""
    if n_classes > len(CLASS_NAMES):
        classes = [f"class{j}" for j in range(n_classes)]
    else:
        classes = list(CLASS_NAMES[:n_classes])
    rest = vocab_size - n_classes
    words = list(ENGLISH[:rest])
    n_rand = rest - len(words)
    n_letters = (n_rand + 1) // 2
    words += _letter_tokens(n_letters) + _number_tokens(n_rand - n_letters)
    return classes + words


def word_ids(vocab_size: int, n_classes: int) -> dict[str, int]:
    return {w: i for i, w in enumerate(vocabulary_words(vocab_size, n_classes))}


# ---------------------------------------------------------------------------
# hand prompts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HandPrompt:
    """Token ids with exactly one :data:`CLASS_SLOT` entry."""

    tokens: tuple[int, ...]
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.tokens.count(CLASS_SLOT) != 1:
            raise ValueError(f"prompt {self.label!r} must contain exactly one class slot")

    @property
    def slot(self) -> int:
        return self.tokens.index(CLASS_SLOT)

    @classmethod
    def from_text(cls, text: str, vocab_size: int, n_classes: int) -> "HandPrompt":
        """Parse e.g. ``"a photo of a [CLASS]"`` against the toy lexicon."""
        ids = word_ids(vocab_size, n_classes)
        toks = []
        for w in text.split():
            if w == "[CLASS]":
                toks.append(CLASS_SLOT)
            elif w in ids and ids[w] >= n_classes:
                toks.append(ids[w])
            else:
                raise ValueError(f"word {w!r} not in the non-class vocabulary")
        return cls(tuple(toks), label=text)

    def text(self, vocab_size: int, n_classes: int) -> str:
        words = vocabulary_words(vocab_size, n_classes)
        return " ".join("[CLASS]" if t == CLASS_SLOT else words[t] for t in self.tokens)


def assemble_hand(vocab: np.ndarray, prompt: HandPrompt, j: int, n_classes: int) -> np.ndarray:
    """Token vectors (L, d) of ``prompt`` with class ``j`` in the slot."""
    if not 0 <= j < n_classes:
        raise IndexError(f"class index {j} out of range [0, {n_classes})")
    v = vocab.shape[0]
    for t in prompt.tokens:
        if t != CLASS_SLOT and not 0 <= t < v:
            raise IndexError(f"token id {t} outside vocabulary of size {v}")
    ids = [j if t == CLASS_SLOT else t for t in prompt.tokens]
    return np.array(vocab[ids])


def hand_tokens(model, prompt: HandPrompt) -> np.ndarray:
    """Stacked token vectors (C, L, d) for every class."""
    return np.stack([assemble_hand(model.vocab, prompt, j, model.n_classes)
                     for j in range(model.n_classes)])


def default_prompt(vocab_size: int, n_classes: int) -> HandPrompt:
    """The ``a photo of a [CLASS]`` template."""
    return HandPrompt.from_text("a photo of a [CLASS]", vocab_size, n_classes)


def probe_prompts(vocab_size: int, n_classes: int, seed: int = 0) -> list[HandPrompt]:
    """Four templated prompts plus two random-token prompts.

    P5 draws letter-string tokens and P6 number-string tokens, four each,
    from ``seed``.
    """
    templates = [
        "a photo of a [CLASS]",
        "a picture of the [CLASS]",
        "an image of a [CLASS]",
        "this is a photo of a [CLASS]",
    ]
    out = [HandPrompt.from_text(t, vocab_size, n_classes) for t in templates]
    words = vocabulary_words(vocab_size, n_classes)
    letters = [i for i, w in enumerate(words) if i >= n_classes and w.isalpha() and w not in ENGLISH]
    numbers = [i for i, w in enumerate(words) if i >= n_classes and w.isdigit()]
    rng = np.random.default_rng(seed)
    for pool in (letters, numbers):
        if len(pool) < 4:
            raise ValueError("vocabulary too small for random-token probes")
        toks = tuple(int(t) for t in rng.choice(pool, 4, replace=False)) + (CLASS_SLOT,)
        p = HandPrompt(toks)
        out.append(HandPrompt(toks, label=p.text(vocab_size, n_classes)))
    return [HandPrompt(p.tokens, label=f"P{i + 1}: {p.label}") for i, p in enumerate(out)]


# ---------------------------------------------------------------------------
# soft contexts
# ---------------------------------------------------------------------------


@dataclass
class PromptContext:
    """Learnable context vectors around a frozen class embedding.

    ``vectors`` is ``(M, d)`` in UC mode and ``(C, M, d)`` in CSC mode.
    """

    mode: str
    vectors: np.ndarray
    class_embeddings: np.ndarray = field(repr=False)
    position: str = "end"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.position not in POSITIONS:
            raise ValueError(f"position must be one of {POSITIONS}, got {self.position!r}")
        self.vectors = np.array(self.vectors, dtype=np.float64)
        ce = np.array(self.class_embeddings, dtype=np.float64)
        ce.flags.writeable = False
        self.class_embeddings = ce
        want = 2 if self.mode == "uc" else 3
        if self.vectors.ndim != want or self.vectors.shape[-1] != ce.shape[1]:
            raise ValueError(f"{self.mode} vectors have shape {self.vectors.shape}")
        if self.mode == "csc" and self.vectors.shape[0] != ce.shape[0]:
            raise ValueError("CSC needs one context per class")
        if self.m < 1:
            raise ValueError("context length must be at least 1")

    @property
    def m(self) -> int:
        return self.vectors.shape[-2]

    @property
    def n_classes(self) -> int:
        return self.class_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[-1]

    @property
    def n_params(self) -> int:
        return self.vectors.size

    @property
    def slot(self) -> int:
        return {"front": 0, "middle": self.m // 2, "end": self.m}[self.position]

    def class_context(self, j: int) -> np.ndarray:
        return self.vectors if self.mode == "uc" else self.vectors[j]

    def assemble(self, j: int) -> np.ndarray:
        """Token vectors (M + 1, d) for class ``j``."""
        if not 0 <= j < self.n_classes:
            raise IndexError(f"class index {j} out of range [0, {self.n_classes})")
        ctx = self.class_context(j)
        p = self.slot
        return np.concatenate([ctx[:p], self.class_embeddings[j : j + 1], ctx[p:]])

    def tokens(self) -> np.ndarray:
        """(C, M + 1, d) token vectors for all classes."""
        return np.stack([self.assemble(j) for j in range(self.n_classes)])

    def snapshot(self) -> "PromptContext":
        snap = PromptContext(self.mode, self.vectors, self.class_embeddings, self.position)
        snap.vectors.flags.writeable = False
        return snap

    def copy(self) -> "PromptContext":
        return PromptContext(self.mode, np.array(self.vectors), self.class_embeddings, self.position)


def context_sequences(g: DiffGraph, ctx: PromptContext, vec: int) -> list[int]:
    """Graph nodes for each class's token sequence given the vectors node."""
    cls = g.leaf(ctx.class_embeddings)
    p = ctx.slot
    seqs = []
    for j in range(ctx.n_classes):
        own = vec if ctx.mode == "uc" else g.slice(vec, j)
        parts = []
        if p > 0:
            parts.append(g.slice(own, slice(0, p)))
        parts.append(g.slice(cls, slice(j, j + 1)))
        if p < ctx.m:
            parts.append(g.slice(own, slice(p, ctx.m)))
        seqs.append(g.concat(*parts))
    return seqs


def init_context(mode: str, m: int, n_classes: int, dim: int, seed: int,
                 class_embeddings=None, position: str = "end") -> PromptContext:
    """Context vectors drawn i.i.d. from N(0, 0.02^2).

    CSC contexts are drawn independently per class.  Without
    ``class_embeddings`` a zero placeholder is attached.
    """
    if m < 1:
        raise ValueError("context length must be at least 1")
    rng = np.random.default_rng(seed)
    shape = (m, dim) if mode == "uc" else (n_classes, m, dim)
    if class_embeddings is None:
        class_embeddings = np.zeros((n_classes, dim))
    return PromptContext(mode, rng.normal(0.0, 0.02, shape), class_embeddings, position)


def nearest_words(ctx: PromptContext, vocab: np.ndarray) -> list[tuple[int, float]]:
    """Closest vocabulary row (Euclidean) for every context vector.

    Vectors are visited in storage order (class-major for CSC).  Ties go to
    the lowest vocabulary index.
    """
    vocab = np.asarray(vocab, dtype=np.float64)
    if vocab.shape[0] == 0:
        raise ValueError("empty vocabulary")
    flat = ctx.vectors.reshape(-1, ctx.dim)
    d2 = ((flat[:, None, :] - vocab[None, :, :]) ** 2).sum(axis=2)
    idx = np.argmin(d2, axis=1)
    return [(int(i), float(np.sqrt(d2[r, i]))) for r, i in enumerate(idx)]


def nearest_words_report(ctx: PromptContext, vocab: np.ndarray, n_classes: int) -> dict:
    words = vocabulary_words(vocab.shape[0], n_classes)
    rows = []
    for k, (i, dist) in enumerate(nearest_words(ctx, vocab)):
        entry = {"vector": k % ctx.m, "word_id": i, "word": words[i], "distance": dist}
        if ctx.mode == "csc":
            entry["class"] = k // ctx.m
        rows.append(entry)
    return {"mode": ctx.mode, "m": ctx.m, "position": ctx.position, "nearest": rows}


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def save_context(ctx: PromptContext, path) -> None:
    c = 1 if ctx.mode == "uc" else ctx.n_classes
    with open(path, "wb") as f:
        f.write(CONTEXT_MAGIC)
        f.write(struct.pack("<H", CONTEXT_VERSION))
        f.write(struct.pack("<B", MODES.index(ctx.mode)))
        f.write(struct.pack("<3I", ctx.m, c, ctx.dim))
        f.write(struct.pack("<B", POSITIONS.index(ctx.position)))
        f.write(ctx.vectors.astype("<f8").tobytes())


def load_context(path, class_embeddings) -> PromptContext:
    raw = Path(path).read_bytes()
    if raw[:4] != CONTEXT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {CONTEXT_MAGIC!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CONTEXT_VERSION:
        raise ValueError(f"{path}: unsupported context format version {version}")
    (mode_b,) = struct.unpack_from("<B", raw, 6)
    m, c, d = struct.unpack_from("<3I", raw, 7)
    (pos_b,) = struct.unpack_from("<B", raw, 19)
    mode = MODES[mode_b]
    shape = (m, d) if mode == "uc" else (c, m, d)
    count = int(np.prod(shape))
    if len(raw) != 20 + 8 * count:
        raise ValueError(f"{path}: size mismatch")
    vec = np.frombuffer(raw, "<f8", count, 20).reshape(shape).copy()
    return PromptContext(mode, vec, class_embeddings, POSITIONS[pos_b])


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
