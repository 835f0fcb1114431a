"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Tolerances and budgets are pinned below.  Experiment-backed criteria share
trained contexts through ``experiments`` so each model is trained once.
"""

import hashlib
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

import experiments as ex
from aptlab.autodiff import OPS
from aptlab.data import sample_shots
from aptlab.harness import (RobustnessMatrix, apt_config, probe_set, prompt_sensitivity_matrix,
                            transfer_eval)
from aptlab.prompt import init_context
from aptlab.training import cost_report, measure_cost, train
from gradchecks import COMPOSITES
from oracles import pgd_grid_ratios, projection_trials
from test_autodiff import case, check_op

# criterion 1
GRAD_RTOL = 1e-4
GRAD_CASES = 100
GRAD_BUDGET_S = 30
# criterion 2
PROJ_RUNS = 10_000
PROJ_BUDGET_S = 60
# criterion 3
ORACLE_CASES = 200
ORACLE_STEPS = 20
ORACLE_RATIO = 0.95
ORACLE_FRACTION = 0.90
ORACLE_BUDGET_S = 60
# criterion 4
MATRIX_MIN_ROWS = 4
MATRIX_BUDGET_S = 300
# criterion 5
EFFICACY_MARGIN = 0.10
EFFICACY_BUDGET_S = 300
# criterion 6
STRATEGY_MARGIN = 0.02
PERTURBED_TOL = 0.03
PERTURBED_ALPHA = 0.001
STRATEGY_BUDGET_S = 600
# criterion 7
CROSSOVER_BUDGET_S = 600
# criterion 8
CACHE_EPOCHS = 5
CACHE_BUDGET_S = 60
# criterion 9
COST_BUDGET_S = 30
# criterion 10
TRANSFER_BUDGET_S = 300

SEEDS = ex.SEEDS
assert len(SEEDS) == 5


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.s = time.perf_counter() - self.t0


def test_criterion_1_gradients(record_criterion):
    with Timer() as t:
        worst = {}
        for kind in sorted(OPS):
            rng = np.random.default_rng(1000 + sorted(OPS).index(kind))
            worst[kind] = max(check_op(kind, *case(kind, rng), rng) for _ in range(GRAD_CASES))
        for name, fn in COMPOSITES.items():
            worst[name] = fn(n=GRAD_CASES)
    top = max(worst, key=worst.get)
    ok = worst[top] < GRAD_RTOL and t.s < GRAD_BUDGET_S
    record_criterion(1, ok, f"{len(worst)} checks x {GRAD_CASES} cases, worst {top} "
                            f"{worst[top]:.1e} < {GRAD_RTOL:g}; {t.s:.1f}s < {GRAD_BUDGET_S}s")
    assert ok


def test_criterion_2_projection(record_criterion):
    with Timer() as t:
        bad = projection_trials(PROJ_RUNS, seed=0)
    ok = bad == 0 and t.s < PROJ_BUDGET_S
    record_criterion(2, ok, f"{PROJ_RUNS} runs, {bad} violations; {t.s:.1f}s < {PROJ_BUDGET_S}s")
    assert ok


def test_criterion_3_pgd_oracle(record_criterion):
    with Timer() as t:
        r = pgd_grid_ratios(ORACLE_CASES, ORACLE_STEPS, seed=0)
    frac = float(np.mean(r >= ORACLE_RATIO))
    ok = frac >= ORACLE_FRACTION and t.s < ORACLE_BUDGET_S
    record_criterion(3, ok, f"{frac:.3f} of {ORACLE_CASES} cases reach {ORACLE_RATIO:.0%} of grid max "
                            f"(need {ORACLE_FRACTION}); {t.s:.1f}s")
    assert ok


def test_criterion_4_matrix(record_criterion):
    with Timer() as t:
        mats = []
        for s in SEEDS:
            lab = ex.lab(s)
            mats.append(prompt_sensitivity_matrix(lab.model, lab.data.test_x, lab.data.test_y,
                                                  probe_set(lab.model), ex.CONFIG.eval_spec()))
        avg = RobustnessMatrix.mean(mats)
    hits = int(avg.diagonal_is_row_min().sum())
    ok = hits >= MATRIX_MIN_ROWS and t.s < MATRIX_BUDGET_S
    record_criterion(4, ok, f"matched diagonal is row minimum in {hits}/6 rows "
                            f"(need {MATRIX_MIN_ROWS}); {t.s:.1f}s")
    assert ok


def test_criterion_5_efficacy(record_criterion):
    with Timer() as t:
        apt = ex.mean("apt-uc", shots=16)
        hep = ex.mean("hep")
    gap = apt - hep
    ok = gap >= EFFICACY_MARGIN and t.s < EFFICACY_BUDGET_S
    record_criterion(5, ok, f"APT-UC {apt:.4f} vs hand prompt {hep:.4f}, +{gap * 100:.1f}pp "
                            f"(need {EFFICACY_MARGIN * 100:.0f}pp); {t.s:.1f}s")
    assert ok


def test_criterion_6_strategies(record_criterion):
    with Timer() as t:
        rows = {}
        for mode in ("uc", "csc"):
            m = f"apt-{mode}"
            rows[mode] = (ex.mean(m, shots=16), ex.mean(m, shots=16, strategy="constant"),
                          ex.mean(m, shots=16, strategy="perturbed", alpha_prime=PERTURBED_ALPHA))
    oks = []
    for mode, (otf, const, pert) in rows.items():
        ok = otf >= const + STRATEGY_MARGIN and abs(otf - pert) <= PERTURBED_TOL
        oks.append(ok)
        print(f"  {mode}: on-the-fly {otf:.4f}, constant {const:.4f} ({(otf - const) * 100:+.1f}pp), "
              f"perturbed {pert:.4f} ({(pert - otf) * 100:+.2f}pp) -> {'ok' if ok else 'short'}")
    ok = all(oks) and t.s < STRATEGY_BUDGET_S
    detail = "; ".join(f"{m}: otf-const {(r[0] - r[1]) * 100:+.1f}pp, |otf-pert| "
                       f"{abs(r[0] - r[2]) * 100:.2f}pp" for m, r in rows.items())
    record_criterion(6, ok, f"{detail} (need >= {STRATEGY_MARGIN * 100:.0f}pp and <= "
                            f"{PERTURBED_TOL * 100:.0f}pp); {t.s:.1f}s")
    assert ok


def test_criterion_7_crossover(record_criterion):
    with Timer() as t:
        uc1, csc1 = ex.mean("apt-uc", shots=1), ex.mean("apt-csc", shots=1)
        uc16, csc16 = ex.mean("apt-uc", shots=16), ex.mean("apt-csc", shots=16)
    ok = uc1 >= csc1 and csc16 >= uc16 and t.s < CROSSOVER_BUDGET_S
    record_criterion(7, ok, f"1-shot UC {uc1:.4f} vs CSC {csc1:.4f}; 16-shot UC {uc16:.4f} vs "
                            f"CSC {csc16:.4f}; {t.s:.1f}s")
    assert ok


def test_criterion_8_constant_cache(record_criterion):
    with Timer() as t:
        lab = ex.lab(0)
        cfg = apt_config(lab, 16, "uc", "constant")
        cfg = replace(cfg, epochs=CACHE_EPOCHS)
        idx = sample_shots(lab.data, 16, 0).indices
        ctx = init_context("uc", cfg.m, 8, 32, 0, lab.model.class_embeddings)
        seen = {}

        def cb(epoch, step, sel, out):
            for row, i in zip(out["images"], idx[sel]):
                seen.setdefault(int(i), {}).setdefault(epoch, hashlib.sha256(row.tobytes()).hexdigest())

        train(ctx, lab.model, lab.data.train_x[idx], lab.data.train_y[idx], cfg, ids=idx, callback=cb)
    same = sum(len(set(h.values())) == 1 and len(h) == CACHE_EPOCHS for h in seen.values())
    ok = same == len(idx) and t.s < CACHE_BUDGET_S
    record_criterion(8, ok, f"{same}/{len(idx)} examples with one checksum across {CACHE_EPOCHS} "
                            f"epochs; {t.s:.1f}s")
    assert ok


def test_criterion_9_cost(record_criterion):
    with Timer() as t:
        lab = ex.lab(0)
        idx = sample_shots(lab.data, 8, 0).indices
        x, y = lab.data.train_x[idx], lab.data.train_y[idx]
        res = []
        for strategy in ("constant", "on-the-fly", "perturbed"):
            cfg = apt_config(lab, 8, "uc", strategy, alpha_prime=0.01)
            cfg = replace(cfg, epochs=3)
            ctx = init_context("uc", cfg.m, 8, 32, 0, lab.model.class_embeddings)
            _, total = measure_cost(ctx, lab.model, x, y, cfg)
            want = cost_report(cfg, len(idx)).total
            res.append((strategy, {k: total.get(k, 0) for k in want} == want, want))
    ok = all(r[1] for r in res) and t.s < COST_BUDGET_S
    record_criterion(9, ok, ", ".join(f"{s} {'exact' if m else 'MISMATCH'} {w}" for s, m, w in res)
                     + f"; {t.s:.1f}s")
    assert ok


def test_criterion_10_transfer(record_criterion):
    with Timer() as t:
        runs = []
        for s in SEEDS:
            lab = ex.lab(s)
            runs.append(transfer_eval(lab.model, ex.context(s, 16, "uc"), probe_set(lab.model),
                                      lab.data.test_x, lab.data.test_y, ex.CONFIG.eval_spec()))
    matched = float(np.mean([r["matched"] for r in runs]))
    transfer = {k: float(np.mean([r["transfer"][k] for r in runs])) for k in runs[0]["transfer"]}
    ok = all(matched <= v for v in transfer.values()) and t.s < TRANSFER_BUDGET_S
    record_criterion(10, ok, f"matched {matched:.4f} <= min transfer {min(transfer.values()):.4f} "
                             f"over {len(transfer)} probes; {t.s:.1f}s")
    assert ok


PIPELINE = [
    ["gen-data", "--run-dir", "w", "--per-class", "32", "--ground-steps", "50"],
    ["train", "--data", "w/data.aptd", "--model", "w/model.aptm", "--run-dir", "t", "--shots", "4",
     "--epochs", "5", "--lr", "0.3"],
    ["train", "--data", "w/data.aptd", "--model", "w/model.aptm", "--run-dir", "tc", "--shots", "4",
     "--epochs", "3", "--lr", "0.3", "--strategy", "constant"],
    ["attack", "--data", "w/data.aptd", "--model", "w/model.aptm", "--context", "t/context.aptc",
     "--steps", "10", "--run-dir", "a"],
    ["eval-matrix", "--data", "w/data.aptd", "--model", "w/model.aptm", "--steps", "5",
     "--run-dir", "m"],
    ["transfer-eval", "--data", "w/data.aptd", "--model", "w/model.aptm", "--context",
     "t/context.aptc", "--steps", "5", "--run-dir", "x"],
    ["shift-eval", "--data", "w/data.aptd", "--model", "w/model.aptm", "--context",
     "apt-uc=t/context.aptc", "--methods", "hep", "--steps", "5", "--run-dir", "s"],
    ["shift-eval", "--data", "w/data.aptd", "--model", "w/model.aptm", "--methods", "hep,paft,apt-csc",
     "--novel-classes", "--steps", "5", "--run-dir", "sn"],
    ["shot-sweep", "--methods", "hep,apt-uc,paft", "--shots", "1", "--seeds", "0,1", "--steps", "3",
     "--run-dir", "r"],
    ["decode-context", "t/context.aptc", "--model", "w/model.aptm", "--run-dir", "d"],
    ["cost-report", "--strategy", "perturbed", "--run-dir", "c"],
]


def _pipeline(cwd):
    env = dict(os.environ, APT_LAB_THREADS="2")
    for argv in PIPELINE:
        subprocess.run([sys.executable, "-m", "aptlab.cli", *argv], cwd=cwd, env=env, check=True,
                       capture_output=True)
    return {str(p.relative_to(cwd)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(cwd).rglob("*")) if p.is_file()}


def test_criterion_11_determinism(record_criterion, tmp_path):
    a, b = tmp_path / "one", tmp_path / "two"
    a.mkdir()
    b.mkdir()
    with Timer() as t:
        ha, hb = _pipeline(a), _pipeline(b)
    diff = sorted(k for k in ha.keys() | hb.keys() if ha.get(k) != hb.get(k))
    ok = not diff and len(ha) > 0
    record_criterion(11, ok, f"{len(ha)} artifacts from {len(PIPELINE)} commands byte-identical "
                             f"across two runs{'; differ: ' + ', '.join(diff) if diff else ''}; "
                             f"{t.s:.1f}s")
    assert ok
