"""Synthetic Gaussian-cluster image datasets, N-shot sampling, file I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .prompt import vocabulary_words

MAGIC = b"APTD"
VERSION = 1


class SeparabilityError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 8
    dx: int = 64
    sigma: float = 0.08
    separation: float = 0.5  # L2 length of each class offset from the shared base
    train_per_class: int = 64
    test_per_class: int = 64
    mean_offset: float = 0.0  # shift: L2 length of a per-class mean displacement
    noise_mult: float = 1.0  # shift: multiplier on sigma
    vocab_size: int = 64
    seed: int = 0


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_means: np.ndarray
    class_names: list[str]
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def lexicon(self) -> dict[str, int]:
        """Class name -> vocabulary token id."""
        return {name: j for j, name in enumerate(self.class_names)}

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return replace(self, train_x=self.train_x[idx], train_y=self.train_y[idx])


def _class_means(spec: SyntheticSpec, rng) -> np.ndarray:
    base = rng.uniform(0.35, 0.65, spec.dx)
    off = rng.normal(size=(spec.n_classes, spec.dx))
    off *= spec.separation / np.linalg.norm(off, axis=1, keepdims=True)
    return np.clip(base + off, 0.2, 0.8)


def _draw(means, per_class, sigma, rng):
    y = np.repeat(np.arange(means.shape[0]), per_class)
    x = means[y] + sigma * rng.normal(size=(y.size, means.shape[1]))
    return np.clip(x, 0.0, 1.0), y


def linear_probe_accuracy(train_x, train_y, test_x, test_y) -> float:
    """Test accuracy of a least-squares one-vs-all linear classifier."""
    c = int(max(train_y.max(), test_y.max())) + 1
    a = np.hstack([train_x, np.ones((train_x.shape[0], 1))])
    target = np.eye(c)[train_y]
    w, *_ = np.linalg.lstsq(a, target, rcond=None)
    pred = np.argmax(np.hstack([test_x, np.ones((test_x.shape[0], 1))]) @ w, axis=1)
    return float(np.mean(pred == test_y))


def generate(spec: SyntheticSpec = SyntheticSpec(), check: bool = True) -> Dataset:
    """Draw a dataset; deterministic in ``spec.seed``.

    Raises :class:`SeparabilityError` when a least-squares linear classifier
    fails to reach 90% test accuracy.
    """
    rng = np.random.default_rng(spec.seed)
    means = _class_means(spec, rng)
    sigma = spec.sigma * spec.noise_mult
    train_x, train_y = _draw(means, spec.train_per_class, sigma, rng)
    test_x, test_y = _draw(means, spec.test_per_class, sigma, rng)
    names = vocabulary_words(spec.vocab_size, spec.n_classes)[: spec.n_classes]
    ds = Dataset(train_x, train_y, test_x, test_y, means, names, spec)
    if check:
        acc = linear_probe_accuracy(train_x, train_y, test_x, test_y)
        if acc < 0.9:
            raise SeparabilityError(f"linear probe accuracy {acc:.3f} < 0.90")
    return ds


def shift(ds: Dataset, mean_offset: float = 0.0, noise_mult: float = 1.0,
          seed: int | None = None) -> Dataset:
    """Redraw ``ds`` from displaced class means and scaled noise.

    Class names, labels and sizes are unchanged.  With zero offset and unit
    multiplier this is a fresh draw from the source generator.
    """
    spec = replace(ds.spec, mean_offset=mean_offset, noise_mult=noise_mult,
                   seed=ds.spec.seed + 7919 if seed is None else seed)
    rng = np.random.default_rng(spec.seed)
    means = np.array(ds.class_means)
    if mean_offset > 0:
        d = rng.normal(size=means.shape)
        means = np.clip(means + mean_offset * d / np.linalg.norm(d, axis=1, keepdims=True), 0.0, 1.0)
    sigma = ds.spec.sigma * noise_mult
    per_train = np.bincount(ds.train_y, minlength=ds.n_classes)[0]
    per_test = np.bincount(ds.test_y, minlength=ds.n_classes)[0]
    train_x, train_y = _draw(means, per_train, sigma, rng)
    test_x, test_y = _draw(means, per_test, sigma, rng)
    return Dataset(train_x, train_y, test_x, test_y, means, list(ds.class_names), spec)


@dataclass(frozen=True)
class ShotSample:
    n: int
    per_class: tuple[tuple[int, ...], ...]

    @property
    def indices(self) -> np.ndarray:
        return np.array([i for cls in self.per_class for i in cls], dtype=np.intp)


def sample_shots(ds: Dataset, n: int, seed: int) -> ShotSample:
    """``min(n, class size)`` training indices per class, drawn without replacement."""
    if n < 1:
        raise ValueError(f"shots must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    per = []
    for j in range(ds.n_classes):
        pool = np.flatnonzero(ds.train_y == j)
        k = min(n, pool.size)
        per.append(tuple(int(i) for i in np.sort(rng.choice(pool, k, replace=False))))
    return ShotSample(n, tuple(per))


# ---------------------------------------------------------------------------
# file I/O: .aptd binary + .lexicon.json sidecar
# ---------------------------------------------------------------------------


def lexicon_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".lexicon.json")


def save_dataset(ds: Dataset, path) -> None:
    c, dx = ds.class_means.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<4I", c, dx, ds.train_x.shape[0], ds.test_x.shape[0]))
        for arr in (ds.class_means, ds.train_x, ds.test_x):
            f.write(arr.astype("<f8").tobytes())
        for arr in (ds.train_y, ds.test_y):
            f.write(arr.astype("<i8").tobytes())
    meta = {"class_names": ds.class_names, "lexicon": ds.lexicon, "spec": asdict(ds.spec)}
    lexicon_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported dataset format version {version}")
    c, dx, ntr, nte = struct.unpack_from("<4I", raw, 6)
    off = 22
    out = []
    for shape, dt in (((c, dx), "<f8"), ((ntr, dx), "<f8"), ((nte, dx), "<f8"),
                      ((ntr,), "<i8"), ((nte,), "<i8")):
        count = int(np.prod(shape))
        out.append(np.frombuffer(raw, dt, count, off).reshape(shape).copy())
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: size mismatch")
    means, trx, tex, tr_y, te_y = out
    meta = json.loads(lexicon_path(path).read_text())
    spec = SyntheticSpec(**meta["spec"])
    return Dataset(trx, tr_y.astype(np.intp), tex, te_y.astype(np.intp), means,
                   list(meta["class_names"]), spec)
