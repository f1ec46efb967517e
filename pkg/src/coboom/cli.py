"""Operator surface.

Commands: ``synth`` (write a synthetic dataset), ``train`` (pre-train and
emit checkpoint + JSONL metrics), ``probe`` / ``finetune`` (downstream
evaluation reports), ``gradcheck`` (finite-difference audit of the full
objective), ``codebook-stats`` (usage histogram + perplexity), and
``report`` (figures + CSV from a metrics stream).

Exit codes: 0 success, 1 validation, 2 I/O or corrupt checkpoint,
3 numeric failure (NaN or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import Tensor, grad_check
from .checkpoint import load_checkpoint
from .codebook import codebook_perplexity, quantize, usage_histogram
from .config import RunConfig, config_for_preset, tiny_config
from .data import generate_synthetic, load_dataset, save_dataset
from .errors import (CheckpointError, ConfigurationError, ContractError,
                     DimensionError, FormatError, NumericError, ParseError)
from .evaluate import finetune_evaluation, probe_evaluation
from .model import encode, forward_pass, init_model_state
from .objectives import LossWeights, directional_loss, symmetric_loss
from .report import render_training_report
from .trainer import train

GRADCHECK_TOL = 1e-4


def _resolve_config(args, **extra) -> RunConfig:
    overrides: dict = {}
    if getattr(args, "config", None):
        overrides.update(json.loads(Path(args.config).read_text()))
    for key in ("seed", "epochs", "batch_size", "base_lr", "optimizer",
                "max_steps", "ckpt_every"):
        val = getattr(args, key, None)
        if val is not None:
            overrides["checkpoint_every" if key == "ckpt_every" else key] = val
    if getattr(args, "no_decoder", False):
        overrides["use_decoder"] = False
    if getattr(args, "no_diversifuse", False):
        overrides["use_diversifuse"] = False
    if getattr(args, "no_predictor", False):
        overrides["use_predictor"] = False
    overrides.update(extra)
    preset = overrides.pop("preset", getattr(args, "preset", None) or "desk")
    return config_for_preset(preset, **overrides)


def _write_json(payload: dict, out_path: str | None, default_name: str) -> Path:
    path = Path(out_path) if out_path else Path(default_name)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="ascii")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    ds = generate_synthetic(args.n, args.classes, args.size, args.seed)
    manifest = save_dataset(ds, args.out)
    print(f"wrote {len(ds.samples)} samples ({ds.n_classes} classes, "
          f"{ds.image_size}x{ds.image_size}) -> {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args, data_path=args.data, out_dir=args.out)
    dataset = load_dataset(args.data)
    result = train(cfg, dataset, args.out)
    print(f"trained {result.steps} steps -> {result.checkpoint_path}")
    print(f"metrics -> {result.metrics_path}")
    return 0


def cmd_probe(args) -> int:
    state, cfg = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    epochs = args.probe_epochs if args.probe_epochs is not None else cfg.probe_epochs
    lr = args.probe_lr if args.probe_lr is not None else cfg.probe_lr
    report = probe_evaluation(state.encoder, dataset, args.fraction, args.seed, epochs, lr)
    if args.with_baseline:
        baseline_state = init_model_state(cfg)
        baseline = probe_evaluation(baseline_state.encoder, dataset, args.fraction,
                                    args.seed, epochs, lr)
        report["baseline_macro_auc"] = baseline["macro_auc"]
        report["baseline_per_class_auc"] = baseline["per_class_auc"]
        if report["macro_auc"] is not None and baseline["macro_auc"] is not None:
            report["auc_gain_over_random_init"] = report["macro_auc"] - baseline["macro_auc"]
    path = _write_json(report, args.out, "probe_report.json")
    print(f"macro AUC {report['macro_auc']} -> {path}")
    return 0


def cmd_finetune(args) -> int:
    state, cfg = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    report = finetune_evaluation(state, dataset, args.fraction, args.seed,
                                 args.epochs, args.lr)
    path = _write_json(report, args.out, "finetune_report.json")
    print(f"macro AUC {report['macro_auc']} -> {path}")
    return 0


def build_gradcheck_problem(seed: int):
    """Tiny preset, one deterministic view pair, the full symmetric objective."""
    cfg = tiny_config(seed=seed)
    state = init_model_state(cfg)
    rng = np.random.default_rng(seed)
    x1 = Tensor(rng.uniform(0.0, 1.0, size=(1, cfg.image_size, cfg.image_size)))
    x2 = Tensor(rng.uniform(0.0, 1.0, size=(1, cfg.image_size, cfg.image_size)))
    weights = LossWeights(alpha=cfg.alpha, gamma=cfg.gamma, alpha_commit=cfg.alpha_commit)

    def loss_fn() -> Tensor:
        bd12 = directional_loss(forward_pass(x1, x2, state, cfg), x1, weights, cfg)
        bd21 = directional_loss(forward_pass(x2, x1, state, cfg), x2, weights, cfg)
        return symmetric_loss(bd12, bd21)

    return loss_fn, dict(state.trainable_parameters())


def cmd_gradcheck(args) -> int:
    loss_fn, params = build_gradcheck_problem(args.seed)
    report = grad_check(loss_fn, params, eps=args.eps)
    n_coords = sum(p.size for p in params.values())
    print(f"checked {len(params)} parameters ({n_coords} coordinates), eps={args.eps:g}")
    print(f"max relative error {report.max_rel_error:.3e} at "
          f"{report.worst_param}[{report.worst_index}] "
          f"(analytic {report.worst_analytic:.6e}, numeric {report.worst_numeric:.6e})")
    if report.passed(GRADCHECK_TOL):
        print(f"gradcheck PASS (< {GRADCHECK_TOL:g})")
        return 0
    print(f"gradcheck FAIL (>= {GRADCHECK_TOL:g})")
    return 3


def cmd_codebook_stats(args) -> int:
    state, cfg = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    samples = dataset.samples if args.split == "all" else dataset.subset(args.split)
    if not samples:
        raise ContractError(f"split {args.split!r} is empty")
    indices = []
    for s in samples:
        tokens = encode(state.target_encoder, Tensor(s.pixels[None, :, :]))
        indices.append(quantize(tokens, state.codebook).indices)
    flat = np.concatenate(indices)
    payload = {
        "codebook_size": cfg.codebook_size,
        "n_tokens": int(flat.size),
        "histogram": usage_histogram(flat, cfg.codebook_size).tolist(),
        "perplexity": codebook_perplexity(flat, cfg.codebook_size),
    }
    text = json.dumps(payload, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="ascii")
    print(text)
    return 0


def cmd_report(args) -> int:
    written = render_training_report(args.metrics, args.out, args.eval or ())
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coboom",
                                description="Codebook-guided bootstrapping, desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--classes", type=int, default=2)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="pre-train and write checkpoint + metrics")
    tp.add_argument("--data", required=True, help="dataset manifest JSON")
    tp.add_argument("--out", required=True, help="output directory")
    tp.add_argument("--preset", choices=("desk", "paper"))
    tp.add_argument("--config", help="JSON file of config overrides")
    tp.add_argument("--seed", type=int)
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--batch-size", dest="batch_size", type=int)
    tp.add_argument("--base-lr", dest="base_lr", type=float)
    tp.add_argument("--optimizer", choices=("sgd", "lars"))
    tp.add_argument("--max-steps", dest="max_steps", type=int)
    tp.add_argument("--ckpt-every", dest="ckpt_every", type=int)
    tp.add_argument("--no-decoder", action="store_true")
    tp.add_argument("--no-diversifuse", action="store_true")
    tp.add_argument("--no-predictor", action="store_true")
    tp.set_defaults(func=cmd_train)

    pp = sub.add_parser("probe", help="frozen-encoder linear probe evaluation")
    pp.add_argument("--ckpt", required=True)
    pp.add_argument("--data", required=True)
    pp.add_argument("--fraction", type=float, default=1.0)
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--probe-epochs", dest="probe_epochs", type=int)
    pp.add_argument("--probe-lr", dest="probe_lr", type=float)
    pp.add_argument("--with-baseline", action="store_true",
                    help="also probe a random-initialized encoder for comparison")
    pp.add_argument("--out")
    pp.set_defaults(func=cmd_probe)

    fp = sub.add_parser("finetune", help="semi-supervised fine-tuning evaluation")
    fp.add_argument("--ckpt", required=True)
    fp.add_argument("--data", required=True)
    fp.add_argument("--fraction", type=float, default=1.0)
    fp.add_argument("--seed", type=int, default=0)
    fp.add_argument("--epochs", type=int, default=30)
    fp.add_argument("--lr", type=float, default=0.05)
    fp.add_argument("--out")
    fp.set_defaults(func=cmd_finetune)

    gp = sub.add_parser("gradcheck", help="finite-difference audit of the full objective")
    # default seed gives every relu unit a pre-activation clear of the kink,
    # where central differences and the subgradient legitimately disagree
    gp.add_argument("--seed", type=int, default=3)
    gp.add_argument("--eps", type=float, default=1e-4)
    gp.set_defaults(func=cmd_gradcheck)

    cp = sub.add_parser("codebook-stats", help="codeword usage histogram and perplexity")
    cp.add_argument("--ckpt", required=True)
    cp.add_argument("--data", required=True)
    cp.add_argument("--split", choices=("train", "test", "all"), default="train")
    cp.add_argument("--out")
    cp.set_defaults(func=cmd_codebook_stats)

    rp = sub.add_parser("report", help="render figures + CSV from a metrics stream")
    rp.add_argument("--metrics", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--eval", nargs="*", help="evaluation report JSONs to chart")
    rp.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return 0 if not e.code else 1
    try:
        return args.func(args)
    except (ConfigurationError, ContractError, DimensionError, ParseError, FormatError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
