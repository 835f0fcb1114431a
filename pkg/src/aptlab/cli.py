"""Command-line entry point: ``aptlab <command> [flags]``.

Exit status is 0 on success, 2 on a configuration error (bad flags, missing
input files, invalid combinations) and 1 on a failure during the run.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from fractions import Fraction
from pathlib import Path

from . import kernels


class UsageError(Exception):
    pass


def parse_eps(text: str) -> float:
    """Budget as a decimal (``0.0157``) or a fraction (``4/255``)."""
    try:
        v = float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"invalid budget {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("budget must be non-negative")
    return v


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return [t for t in text.split(",") if t]


def _existing(path, magics=None):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    if magics is not None:
        with open(p, "rb") as f:
            head = f.read(4)
        if head not in magics:
            want = " or ".join(m.decode() for m in magics)
            raise UsageError(f"{path} is not a {want} file")
    return p


def _common(p):
    p.add_argument("--run-dir", default=".", help="directory for outputs and config.resolved.json")
    p.add_argument("--seed", type=int, default=0)


def _attack_flags(p, steps=100):
    p.add_argument("--eps", type=parse_eps, default=4 / 255, help="l-inf budget, e.g. 4/255")
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--alpha", type=parse_eps, default=None, help="step size (default eps/4)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aptlab", description="Adversarial prompt tuning on a toy dual encoder.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset and its grounded frozen model")
    _common(p)
    p.add_argument("--n-classes", type=int, default=8)
    p.add_argument("--dx", type=int, default=64)
    p.add_argument("--sigma", type=float, default=0.08)
    p.add_argument("--separation", type=float, default=0.5)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--ground-steps", type=int, default=150)

    p = sub.add_parser("train", help="adversarial prompt tuning")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--config", help="JSON file with training keys; flags override it")
    p.add_argument("--strategy", choices=("constant", "on-the-fly", "perturbed"))
    p.add_argument("--shots", type=int)
    p.add_argument("--eps", type=parse_eps)
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=parse_eps)
    p.add_argument("--alpha-prime", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--mode", choices=("uc", "csc"))
    p.add_argument("--position", choices=("front", "middle", "end"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("attack", help="PGD evaluation of a context or hand prompt")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--context")
    g.add_argument("--prompt", default="a photo of a [CLASS]")
    _attack_flags(p)

    p = sub.add_parser("eval-matrix", help="inference-prompt x attack-prompt robustness matrix")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--prompts", help="JSON list of prompt strings or {label, text} objects")
    _attack_flags(p)

    p = sub.add_parser("transfer-eval", help="robustness of a context against probe-prompt adversaries")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--prompts")
    _attack_flags(p)

    p = sub.add_parser("shot-sweep", help="methods x shots table over seeded labs")
    _common(p)
    p.add_argument("--methods", type=_str_list, default=["hep", "apt-uc", "apt-csc", "avp", "paft"])
    p.add_argument("--shots", type=_int_list, default=[1, 4, 16])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--eps", type=parse_eps, default=4 / 255)
    p.add_argument("--steps", type=int, default=100)

    p = sub.add_parser("shift-eval", help="evaluate source contexts on a shifted dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--context", action="append", default=[], help="METHOD=PATH, repeatable")
    p.add_argument("--methods", type=_str_list, default=[], help="extra methods (hep, paft, ...)")
    p.add_argument("--offset", type=float, default=0.1)
    p.add_argument("--noise-mult", type=float, default=1.25)
    p.add_argument("--novel-classes", action="store_true",
                   help="treat the target as having unseen classes")
    _attack_flags(p)

    p = sub.add_parser("decode-context", help="nearest vocabulary word per context vector")
    _common(p)
    p.add_argument("context")
    p.add_argument("--model", required=True)

    p = sub.add_parser("cost-report", help="predicted encoder passes for a training config")
    _common(p)
    p.add_argument("--config")
    p.add_argument("--strategy", choices=("constant", "on-the-fly", "perturbed"))
    p.add_argument("--eps", type=parse_eps)
    p.add_argument("--k", type=int)
    p.add_argument("--alpha-prime", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-examples", type=int, default=128)
    return ap


# ---------------------------------------------------------------------------
# config resolution (no compute)
# ---------------------------------------------------------------------------


def _train_config(args, vocab_size, n_classes):
    from .training import config_from_dict

    raw = json.loads(_existing(args.config).read_text()) if getattr(args, "config", None) else {}
    for key in ("strategy", "shots", "eps", "k", "alpha", "alpha_prime", "m", "mode",
                "position", "epochs", "batch_size", "lr"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    raw["seed"] = args.seed  # --seed always wins so one flag pins the whole run
    return config_from_dict(raw, vocab_size, n_classes)


def _attack_spec(args):
    from .attack import AttackSpec

    alpha = args.alpha if args.alpha is not None else (args.eps / 4 if args.eps > 0 else 1e-3)
    return AttackSpec(eps=args.eps, steps=args.steps, alpha=alpha, random_start=True, seed=args.seed)


def _load_prompts(path, model):
    from .prompt import HandPrompt, hand_tokens, probe_prompts

    v, c = model.vocab.shape[0], model.n_classes
    if path is None:
        prompts = probe_prompts(v, c)
    else:
        items = json.loads(_existing(path).read_text())
        if not isinstance(items, list) or not items:
            raise UsageError("prompts file must hold a nonempty JSON list")
        prompts = []
        for it in items:
            text = it if isinstance(it, str) else it["text"]
            label = text if isinstance(it, str) else it.get("label", text)
            try:
                prompts.append(HandPrompt(HandPrompt.from_text(text, v, c).tokens, label))
            except ValueError as e:
                raise UsageError(str(e)) from None
    return [(p.label, hand_tokens(model, p)) for p in prompts]


def _resolve(args) -> dict:
    """Validate inputs and expand defaults; returns the resolved config."""
    res = {k: v for k, v in vars(args).items() if k != "func"}
    res["backend"] = kernels.BACKEND
    kinds = {"data": (b"APTD",), "model": (b"APTM",), "config": None, "prompts": None}
    for key, magics in kinds.items():
        if res.get(key):
            _existing(res[key], magics)
    if args.command in ("attack", "transfer-eval", "decode-context") and res.get("context"):
        _existing(res["context"], (b"APTC",))
    if args.command == "shift-eval":
        for item in args.context:
            if "=" not in item:
                raise UsageError(f"--context expects METHOD=PATH, got {item!r}")
            _existing(item.split("=", 1)[1], (b"APTC", b"APTV", b"APTL"))
        from .baselines import CLOSED_SET
        given = {item.split("=", 1)[0] for item in args.context}
        for m in args.methods:
            if m != "hep" and m not in given and not (args.novel_classes and m in CLOSED_SET):
                raise UsageError(f"{m} needs a trained artifact: pass --context {m}=PATH")
    if args.command == "shot-sweep":
        from .baselines import METHODS
        if any(s < 1 for s in args.shots) or not args.shots:
            raise UsageError(f"shots must be positive integers, got {args.shots}")
        bad = [m for m in args.methods if m not in METHODS]
        if bad:
            raise UsageError(f"unknown methods {bad}; choose from {list(METHODS)}")
    if args.command in ("train", "cost-report"):
        v, c = 64, 8
        if getattr(args, "model", None):
            from .model import load_model
            v, c = load_model(args.model).dims[3:]
        cfg = _train_config(args, v, c)
        res = {k: v for k, v in res.items() if k not in cfg.to_dict() or k == "seed"}
        res["train"] = cfg.to_dict()
    if "alpha" in res and "eps" in res:
        res["alpha"] = _attack_spec(args).alpha
    if getattr(args, "steps", None) is not None and args.steps < 1:
        raise UsageError("--steps must be >= 1")
    return res


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, run):
    from .data import SyntheticSpec, generate, save_dataset
    from .model import DualEncoderModel, ground_class_tokens, save_model

    spec = SyntheticSpec(n_classes=args.n_classes, dx=args.dx, sigma=args.sigma,
                         separation=args.separation, train_per_class=args.per_class,
                         test_per_class=args.per_class, vocab_size=args.vocab_size, seed=args.seed + 1000)
    ds = generate(spec)
    model = DualEncoderModel.init(args.seed, dx=args.dx, v=args.vocab_size, n_classes=args.n_classes)
    model = ground_class_tokens(model, ds.class_means, args.ground_steps)
    save_dataset(ds, run / "data.aptd")
    save_model(model, run / "model.aptm")
    return {"data": str(run / "data.aptd"), "model": str(run / "model.aptm")}


def _load(args):
    from .data import load_dataset
    from .model import load_model

    model = load_model(args.model)
    ds = load_dataset(args.data) if getattr(args, "data", None) else None
    return model, ds


def cmd_train(args, run):
    from .data import sample_shots
    from .prompt import init_context, save_context
    from .training import train, write_history

    model, ds = _load(args)
    cfg = _train_config(args, model.vocab.shape[0], model.n_classes)
    idx = sample_shots(ds, cfg.shots, cfg.seed).indices
    ctx = init_context(cfg.mode, cfg.m, model.n_classes, model.embed_dim, cfg.seed,
                       model.class_embeddings, cfg.position)
    ctx, hist = train(ctx, model, ds.train_x[idx], ds.train_y[idx], cfg, ids=idx)
    save_context(ctx, run / "context.aptc")
    write_history(hist, run / "history.csv")
    return {"context": str(run / "context.aptc"), "history": str(run / "history.csv"),
            "final": {k: hist[-1][k] for k in ("train_loss", "clean_acc", "robust_acc")} if hist else {}}


def cmd_attack(args, run):
    from .harness import evaluate_tokens, write_predictions
    from .prompt import HandPrompt, hand_tokens, load_context, write_json

    model, ds = _load(args)
    if args.context:
        tokens = load_context(args.context, model.class_embeddings).tokens()
    else:
        tokens = hand_tokens(model, HandPrompt.from_text(args.prompt, model.vocab.shape[0], model.n_classes))
    res = evaluate_tokens(model, tokens, ds.test_x, ds.test_y, _attack_spec(args))
    write_predictions(res, run / "predictions.log")
    write_json(res.metrics(), run / "report.json")
    return res.metrics()


def cmd_eval_matrix(args, run):
    from .harness import prompt_sensitivity_matrix

    model, ds = _load(args)
    mat = prompt_sensitivity_matrix(model, ds.test_x, ds.test_y, _load_prompts(args.prompts, model),
                                    _attack_spec(args))
    mat.save(run / "matrix.csv")
    return {"matrix": str(run / "matrix.csv"),
            "matched_is_row_min": [bool(b) for b in mat.diagonal_is_row_min()]}


def cmd_transfer_eval(args, run):
    from .harness import transfer_eval
    from .prompt import load_context, write_json

    model, ds = _load(args)
    ctx = load_context(args.context, model.class_embeddings)
    out = transfer_eval(model, ctx, _load_prompts(args.prompts, model), ds.test_x, ds.test_y,
                        _attack_spec(args))
    write_json(out, run / "transfer.json")
    return out


def cmd_shot_sweep(args, run):
    from .harness import LabConfig, shot_sweep

    lab = LabConfig(eps=args.eps, eval_steps=args.steps)
    rep = shot_sweep(args.methods, args.shots, args.seeds, lab)
    rep.save(run / "report.json")
    print(rep.table())
    return {"report": str(run / "report.json")}


def cmd_shift_eval(args, run):
    from .baselines import load_head, load_visual_prompt
    from .harness import Lab, LabConfig, shift_eval
    from .data import shift
    from .prompt import load_context, write_json

    model, ds = _load(args)
    arts = {}
    for item in args.context:
        method, path = item.split("=", 1)
        magic = Path(path).read_bytes()[:4]
        if magic == b"APTL":
            arts[method] = load_head(path)
        elif magic == b"APTV":
            arts[method] = load_visual_prompt(path)
        else:
            arts[method] = load_context(path, model.class_embeddings)
    for m in args.methods:
        arts.setdefault(m, None)
    cfg = LabConfig(n_classes=model.n_classes, vocab_size=model.vocab.shape[0], eps=args.eps,
                    eval_steps=args.steps)
    lab = Lab(args.seed, model, ds, cfg)
    target = shift(ds, args.offset, args.noise_mult, seed=args.seed + 7919)
    out = {"source": shift_eval(lab, arts, ds, novel_classes=False) if not args.novel_classes else None,
           "target": shift_eval(lab, arts, target, novel_classes=args.novel_classes)}
    write_json(out, run / "shift.json")
    return out


def cmd_decode_context(args, run):
    from .model import load_model
    from .prompt import load_context, nearest_words_report, write_json

    model = load_model(args.model)
    ctx = load_context(args.context, model.class_embeddings)
    rep = nearest_words_report(ctx, model.vocab, model.n_classes)
    write_json(rep, run / "decoded.json")
    print(json.dumps(rep, indent=2, sort_keys=True))
    return {"decoded": str(run / "decoded.json")}


def cmd_cost_report(args, run):
    from dataclasses import asdict
    from .prompt import write_json
    from .training import cost_report

    cfg = _train_config(args, 64, 8)
    rep = asdict(cost_report(cfg, args.n_examples))
    write_json(rep, run / "cost.json")
    return rep


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack,
    "eval-matrix": cmd_eval_matrix, "transfer-eval": cmd_transfer_eval,
    "shot-sweep": cmd_shot_sweep, "shift-eval": cmd_shift_eval,
    "decode-context": cmd_decode_context, "cost-report": cmd_cost_report,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on unknown or malformed flags
    try:
        resolved = _resolve(args)
        run_dir = Path(args.run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    except (UsageError, ValueError, KeyError, OSError) as e:
        print(f"aptlab {args.command}: config error: {e}", file=sys.stderr)
        return 2
    text = json.dumps(resolved, indent=2, sort_keys=True, default=str)
    print(text)
    (run_dir / "config.resolved.json").write_text(text + "\n")
    t0 = time.perf_counter()
    try:
        out = COMMANDS[args.command](args, run_dir)
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        print(f"aptlab {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(json.dumps(out, indent=2, sort_keys=True, default=str))
    print(f"done in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
