"""Time the attack kernels under each available backend.

    python3 benchmarks/bench_kernels.py --batch 512 --repeat 20

Prints one row per (kernel, backend) with the best wall time per call, and
the speedup of the compiled backend over the numpy fallback.
"""

import argparse
import timeit

import numpy as np

from aptlab import kernels
from aptlab.attack import AttackSpec, attack
from aptlab.model import DualEncoderModel, encode_text


def _setup(batch, seed):
    m = DualEncoderModel.init(seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (batch, m.w1.shape[0]))
    y = rng.integers(0, m.n_classes, batch)
    tokens = m.vocab[:m.n_classes, None, :]
    return m, x, y, tokens, encode_text(m, tokens)


def bench(batch=512, repeat=20, seed=0):
    m, x, y, tokens, t = _setup(batch, seed)
    grad = np.random.default_rng(seed).normal(size=x.shape)
    rows = []
    for name in sorted(kernels.available_backends()):
        cases = {
            "image_loss_grad": lambda: kernels.image_loss_grad(
                x, m.w1, m.b1, m.w2, m.b2, t, 1 / m.tau, y, impl=name),
            "pgd_step": lambda: kernels.pgd_step(x, np.zeros_like(x), grad, 1 / 255, 4 / 255,
                                                 impl=name),
        }
        for kernel, fn in cases.items():
            best = min(timeit.repeat(fn, number=1, repeat=repeat))
            rows.append((kernel, name, best))
    # end-to-end attack uses whichever backend was selected at import
    spec = AttackSpec(eps=4 / 255, steps=10, alpha=1 / 255)
    best = min(timeit.repeat(lambda: attack(m, x, y, tokens, spec, text_features=t,
                                            compute_loss=False), number=1, repeat=max(repeat // 4, 1)))
    rows.append(("pgd-10 attack", kernels.BACKEND, best))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    rows = bench(args.batch, args.repeat, args.seed)
    print(f"{'kernel':<16} {'backend':<10} {'ms/call':>10}")
    for kernel, name, s in rows:
        print(f"{kernel:<16} {name:<10} {s * 1e3:>10.3f}")
    by = {(k, n): s for k, n, s in rows}
    for kernel in ("image_loss_grad", "pgd_step"):
        if (kernel, "compiled") in by:
            print(f"{kernel}: compiled is {by[kernel, 'python'] / by[kernel, 'compiled']:.2f}x "
                  f"the numpy fallback")


if __name__ == "__main__":
    main()
