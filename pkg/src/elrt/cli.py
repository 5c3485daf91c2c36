"""Command-line entry point: ``elrt <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from typing import List, Optional

import numpy as np

from . import checkpoint as ckpt
from .data import export_mnist_subset, load_dataset
from .decomposition import approx_error_study, planted_tucker_kernel, study_to_csv
from .flops import METHODS, model_reduction, training_reduction
from .models import (
    ModelSpec,
    RankConfig,
    apply_rank_config,
    build_model,
    resolve_rank_config,
    scaled_rank_config,
)
from .ortho import RegConfig, RegKind, orthogonality_residual
from .trainer import TrainConfig, evaluate, train


class CliError(Exception):
    pass


def _arch_spec(arch: str, width: float, input_shape=(3, 32, 32), classes: int = 10) -> ModelSpec:
    c, h, _ = input_shape
    m = re.fullmatch(r"resnet(\d+)", arch)
    if m:
        return ModelSpec("resnet", int(m.group(1)), width, classes, c, h)
    if arch in ("mnist-cnn", "mnist_cnn"):
        return ModelSpec("mnist_cnn", 2, width, classes, c, h)
    raise CliError(f"unknown architecture {arch!r} (use resnetN with N = 6n+2, or mnist-cnn)")


def _ranks(ref: Optional[str], model, scale: bool) -> RankConfig:
    if not ref:
        return RankConfig()
    cfg = resolve_rank_config(ref)
    return scaled_rank_config(cfg, model.spec.width, model) if scale else cfg


def _build(args, input_shape=(3, 32, 32), classes=10):
    spec = _arch_spec(args.arch, args.width, input_shape, classes)
    model = build_model(spec, args.seed)
    return apply_rank_config(model, _ranks(args.ranks, model, args.scale_ranks), args.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    train_set, test_set = load_dataset(args.data)
    model = _build(args, train_set.input_shape, train_set.classes)
    cfg = TrainConfig(
        batch_size=args.batch_size, momentum=args.momentum, weight_decay=args.weight_decay,
        base_lr=args.lr, epochs=args.epochs, lambda_d=args.lambda_d,
        reg=RegConfig(args.reg, rho=args.rho), seed=args.seed,
        bn_weight_decay=not args.no_bn_decay, prefetch=args.prefetch,
    )

    def log(rec):
        if not args.quiet:
            print(f"epoch {rec.epoch:3d}  lr {rec.lr:.4f}  loss {rec.train_loss:.4f}  reg {rec.reg_loss:.5f}  "
                  f"acc {rec.test_acc:.4f}  residual {rec.mean_residual if rec.mean_residual is not None else '-'}",
                  flush=True)

    model, metrics = train(model, train_set, cfg, test_set, log)
    ckpt.save_checkpoint(args.out, model, model.optimizer_state,
                         {"epoch": cfg.epochs, "seed": cfg.seed, "train_config": cfg.to_dict()})
    stem = args.metrics or os.path.splitext(args.out)[0] + ".metrics"
    csv_path, jsonl_path = metrics.write(stem)
    print(f"wrote {args.out}, {csv_path}, {jsonl_path}")
    return 0


def cmd_flops(args) -> int:
    model = _build(args, (args.in_channels, args.input_size, args.input_size), args.classes)
    report = model_reduction(model.layer_geometries())
    extra = None
    if args.method != "elrt":
        f_d = report.dense_flops
        if args.method == "dense":
            f_o = None
        elif args.method == "lowrank-comp":
            f_o = report.factorized_flops
        elif args.density is None:
            raise CliError(f"--method {args.method} needs --density (sparse fraction of dense FLOPs)")
        else:
            f_o = f_d * args.density
        extra = training_reduction(args.method, f_d, f_o, args.pretrain_epochs, args.finetune_epochs)
    if args.json:
        out = report.to_dict()
        if extra is not None:
            out[f"{args.method}_training_reduction"] = extra
        print(json.dumps(out, indent=2))
    else:
        print(report.to_table())
        if extra is not None:
            print(f"{args.method} training FLOPs reduction: {extra:.4f}x")
    return 0


def _synthetic_kernel(text: str) -> np.ndarray:
    """``C_in,C_out,K[,r1,r2[,noise[,seed]]]``."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) not in (3, 5, 6, 7):
        raise CliError("--synthetic expects C_in,C_out,K[,r1,r2[,noise[,seed]]]")
    c_in, c_out, k = (int(p) for p in parts[:3])
    if len(parts) == 3:
        return np.random.default_rng(0).standard_normal((c_in, c_out, k, k))
    r1, r2 = int(parts[3]), int(parts[4])
    noise = float(parts[5]) if len(parts) > 5 else 0.1
    seed = int(parts[6]) if len(parts) > 6 else 0
    return planted_tucker_kernel(c_in, c_out, k, r1, r2, noise, seed)


def cmd_approx_error(args) -> int:
    if args.kernel:
        path, _, layer = args.kernel.rpartition(":")
        if not path:
            raise CliError("--kernel expects CKPT:LAYER")
        model, _, _ = ckpt.load_checkpoint(path)
        if model is None or layer not in model.conv_layers():
            raise CliError(f"no convolution {layer!r} in {path}")
        w = model.conv_layers()[layer].dense_kernel()
    else:
        w = _synthetic_kernel(args.synthetic)
    budgets = [int(b) for b in args.budgets.split(",") if b.strip()]
    sys.stdout.write(study_to_csv(approx_error_study(w, budgets)))
    return 0


def cmd_ortho_report(args) -> int:
    model, _, _ = ckpt.load_checkpoint(args.ckpt)
    if model is None:
        raise CliError(f"{args.ckpt} holds no model")
    rows = [(name, key, a.shape, orthogonality_residual(a))
            for name, layer in model.tucker_layers().items() for key, a in layer.factor_matrices().items()]
    print(f"{'layer':<20}{'factor':>7}{'shape':>10}{'residual':>12}")
    for name, key, shape, res in rows:
        print(f"{name:<20}{key:>7}{f'{shape[0]}x{shape[1]}':>10}{res:>12.6f}")
    if rows:
        print(f"{'mean':<37}{np.mean([r[3] for r in rows]):>12.6f}")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = ckpt.load_checkpoint(args.ckpt)
    if model is None:
        raise CliError(f"{args.ckpt} holds no model")
    _, test_set = load_dataset(args.data)
    print(f"top-1 accuracy: {evaluate(model, test_set):.4f}")
    return 0


def cmd_export_mnist(args) -> int:
    export_mnist_subset(args.out, args.test_per_class)
    print(f"wrote MNIST subset to {args.out}")
    return 0


def cmd_ablation(args) -> int:
    from .desk import run_ablation, summarize

    train_set, test_set = load_dataset(args.data)
    regs = [r.strip() for r in args.regs.split(",") if r.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    results = run_ablation(regs, seeds, train_set, test_set, args.epochs, args.lambda_d, print)
    print(summarize(results))
    if args.json:
        payload = {reg: [{"seed": r.seed, "final_acc": r.final_acc,
                          "initial_residual": r.metrics.initial_residual,
                          "final_residual": r.metrics.final.mean_residual} for r in runs]
                   for reg, runs in results.items()}
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)
    return 0


# ---------------------------------------------------------------------------
# parser


def _model_args(p, default_arch="resnet20"):
    p.add_argument("--arch", default=default_arch, help="resnetN (N = 6n+2) or mnist-cnn")
    p.add_argument("--width", type=float, default=1.0, help="channel width multiplier")
    p.add_argument("--ranks", help="rank-config file or bundled name (e.g. resnet20-flops1.98)")
    p.add_argument("--scale-ranks", action="store_true", help="scale the rank table by --width")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elrt", description="Tucker-2 low-rank training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a (hybrid) low-rank model")
    _model_args(p)
    p.add_argument("--reg", default="dso", choices=[k.value for k in RegKind])
    p.add_argument("--lambda-d", type=float, default=1e-3)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--no-bn-decay", action="store_true", help="exempt batch-norm affine parameters from decay")
    p.add_argument("--prefetch", action="store_true", help="prepare the next batch on a helper thread")
    p.add_argument("--data", required=True, help="MNIST IDX or CIFAR-10 binary directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="metrics file stem (default: <out>.metrics)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("flops", help="FLOPs / parameter report for a rank config")
    _model_args(p)
    p.add_argument("--method", default="elrt", choices=METHODS)
    p.add_argument("--density", type=float, help="sparse forward cost as a fraction of dense")
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--input-size", type=int, default=32)
    p.add_argument("--in-channels", type=int, default=3)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("approx-error", help="matrix-SVD vs Tucker-2 approximation error")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--kernel", help="CKPT:LAYER")
    src.add_argument("--synthetic", help="C_in,C_out,K[,r1,r2[,noise[,seed]]]")
    p.add_argument("--budgets", required=True, help="comma-separated parameter budgets")
    p.set_defaults(func=cmd_approx_error)

    p = sub.add_parser("ortho-report", help="per-factor orthogonality residuals")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_ortho_report)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-mnist", help="write the bundled 5000-digit MNIST sample as IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--test-per-class", type=int, default=100)
    p.set_defaults(func=cmd_export_mnist)

    p = sub.add_parser("ablation", help="desk-scale regularizer ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--regs", default="none,dso,so,mc,srip")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lambda-d", type=float, default=1e-3)
    p.add_argument("--json", help="write per-run results here")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"elrt {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
