"""Command line entry point.

Every subcommand prints tab-delimited ``key<TAB>value`` lines on stdout; report
paths also drop PNG figures next to the files they write.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import PRESETS, resolve
from .data import load_dataset
from .ewa import convert_model


def _emit(pairs: dict) -> None:
    for k, v in pairs.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        elif isinstance(v, (list, tuple, dict)):
            v = json.dumps(v)
        print(f"{k}\t{v}")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--config", type=Path, help="JSON file mirroring the TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", help="training set spec, e.g. synthetic:n=1024,classes=10,size=32,seed=7")
    p.add_argument("--test-dataset", help="evaluation set spec")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field, e.g. --set moe.num_experts=8 (repeatable)")


def _resolve(args, extra: list[str] = ()):
    overrides = list(extra) + list(args.overrides)
    if args.dataset:
        overrides.append(f"dataset.train={json.dumps(args.dataset)}")
    if args.test_dataset:
        overrides.append(f"dataset.test={json.dumps(args.test_dataset)}")
    return resolve(args.preset, args.config, overrides, args.seed)


def _figures(paths) -> dict:
    return {f"figure_{i}": str(p) for i, p in enumerate(paths)}


def cmd_train(args) -> int:
    from .plots import plot_training
    from .train import train
    cfg = _resolve(args)
    res = train(cfg, args.out)
    last = res.epochs[-1]
    _emit({"out": str(args.out), "steps": len(res.steps), "params": res.model.num_params(),
           "converted_params": convert_model(res.model).num_params(),
           "final_eval_acc": last["eval_acc"], "final_eval_loss": last["eval_loss"],
           "final_moe_eval_acc": last["moe_eval_acc"]})
    _emit(_figures(plot_training(args.out)))
    return 0


def cmd_finetune(args) -> int:
    from .plots import plot_training
    from .train import finetune
    source = ckpt_io.load(args.checkpoint)
    model_cfg = source.config.get("model", {})
    extra = [f"model.{k}={json.dumps(v)}" for k, v in model_cfg.items()]
    cfg = _resolve(args, extra)
    res = finetune(cfg, source, args.out)
    last = res.epochs[-1]
    _emit({"out": str(args.out), "steps": len(res.steps), "source": str(args.checkpoint),
           "final_eval_acc": last["eval_acc"], "final_eval_loss": last["eval_loss"]})
    _emit(_figures(plot_training(args.out)))
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate
    ckpt = ckpt_io.load(args.checkpoint)
    model = ckpt_io.to_model(ckpt)
    spec = args.dataset or ckpt.config.get("dataset", {}).get("test")
    if not spec:
        raise SystemExit("no --dataset given and the checkpoint config names no test set")
    ds = load_dataset(spec)
    loss, acc = evaluate(convert_model(model), ds, args.batch_size)
    out = {"checkpoint": str(args.checkpoint), "dataset": spec, "items": len(ds),
           "moe_blocks": model.moe_blocks, "eval_loss": loss, "eval_acc": acc}
    if model.moe_blocks:
        out["moe_eval_loss"], out["moe_eval_acc"] = evaluate(model, ds, args.batch_size)
    _emit(out)
    return 0


def cmd_convert(args) -> int:
    from .train import convert_checkpoint
    src = ckpt_io.load(args.checkpoint)
    dense = convert_checkpoint(src)
    ckpt_io.save(args.out, dense)
    model = ckpt_io.to_model(dense)
    _emit({"in": str(args.checkpoint), "out": str(args.out),
           "params_in": int(sum(a.size for a in src.params.values())),
           "params_out": model.num_params(), "provenance": dense.header.get("provenance", "")})
    return 0


def cmd_verify_theory(args) -> int:
    from .plots import plot_theory
    from .theory import decay_and_history_report, per_step_errors, run_probe, write_error_csv
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    worst = 0.0
    for beta in args.beta:
        traj = run_probe(args.experts, args.steps, beta, args.lr, args.seed, args.sign)
        rows = per_step_errors(traj)
        report = decay_and_history_report(traj)
        tag = f"N{args.experts}_m{args.steps}_beta{beta:g}"
        write_error_csv(out / f"errors_{tag}.csv", rows)
        (out / f"report_{tag}.txt").write_text(report.to_text() + "\n")
        fig = plot_theory(rows, report.history_weights, out / f"theory_{tag}.png")
        worst = max(worst, report.unrolled_error, report.single_step_error, report.decay_error)
        _emit({"beta": beta, "single_step_error": report.single_step_error,
               "unrolled_error": report.unrolled_error, "measured_decay": report.measured_decay,
               "expected_decay": report.expected_decay, "history_monotone": report.history_monotone,
               "csv": str(out / f"errors_{tag}.csv"), "figure": str(fig)})
    ok = worst < args.tolerance
    _emit({"max_error": worst, "tolerance": args.tolerance, "status": "pass" if ok else "fail"})
    return 0 if ok else 1


def cmd_bench(args) -> int:
    from .plots import plot_bench
    from .train import bench_latency
    cfg = _resolve(args)
    report = bench_latency(cfg, args.steps, batch_size=args.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    fig = plot_bench(report, out / "bench.png")
    _emit({k: report[k] for k in ("steps", "batch_size", "moe_mode", "num_experts", "placement")})
    for name in ("train_vanilla", "train_ewa", "infer_vanilla", "infer_converted"):
        _emit({f"{name}_median_s": report[name]["median"], f"{name}_iqr_s": report[name]["iqr"]})
    _emit({"train_ratio": report["train_ratio"],
           "train_ratio_vanilla_vs_vanilla": report["train_ratio_vanilla_vs_vanilla"],
           "infer_ratio": report["infer_ratio"], "infer_noise": report["infer_noise"],
           "json": str(out / "bench.json"), "figure": str(fig)})
    return 0


def cmd_plot(args) -> int:
    from .plots import plot_training
    paths = plot_training(args.run_dir)
    if not paths:
        raise SystemExit(f"no steps.csv or epochs.csv in {args.run_dir}")
    _emit(_figures(paths))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ewavit", description="Experts weights averaging for ViTs")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from scratch")
    _config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="expand a dense checkpoint into MoE form and fine-tune")
    _config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_finetune, preset="finetune")

    p = sub.add_parser("eval", help="evaluate a checkpoint (converted and MoE form)")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset")
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert", help="average experts into a plain ViT checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("verify-theory", help="check the unrolled weight-dynamics identity")
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--beta", type=float, nargs="+", default=[0.1, 0.3, 0.5])
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--sign", type=float, default=-1.0, help="+1 or -1 in front of the gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("bench", help="per-step latency of vanilla vs EWA training and inference")
    _config_args(p)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="render figures for a finished run directory")
    p.add_argument("run_dir", type=Path)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, FloatingPointError, OSError) as exc:
        print(f"error\t{exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
