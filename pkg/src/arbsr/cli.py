"""Command-line entry point: ``arbsr <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, parse_config, parse_sweep
from .generator import count_params
from .runner import (ReportInput, RunLocked, evaluate_run, finetune_run, infer, prepare_data, report,
                     train_run)
from .training import TrainingAborted


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="default", help="preset name or YAML file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arbsr", description="Arbitrary-scale medical image super-resolution")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="write the train/test volume corpora")
    _config_args(p)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("train", help="warm-up plus adversarial training")
    _config_args(p)
    p.add_argument("--run-dir", required=True, type=Path)
    p.add_argument("--steps", type=int, help="steps for each of warm-up and adversarial phases")
    p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint instead of resuming")

    p = sub.add_parser("finetune", help="transfer a checkpoint and fine-tune")
    _config_args(p)
    p.add_argument("--run-dir", required=True, type=Path)
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--steps", type=int)
    p.add_argument("--adapt-channels", action="store_true",
                   help="re-initialise channel-dependent layers when the channel count changes")

    p = sub.add_parser("evaluate", help="scale-sweep evaluation on the test split")
    _config_args(p)
    p.add_argument("--run-dir", required=True, type=Path)
    p.add_argument("--ckpt", type=Path, help="defaults to the run's final checkpoint")
    p.add_argument("--baseline", choices=["bicubic"])
    p.add_argument("--sanity", action="store_true", help="feed HR slices without degradation")

    p = sub.add_parser("infer", help="super-resolve one slice file")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--scale", required=True, type=float)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("report", help="merge metric tables into comparison files")
    p.add_argument("inputs", nargs="+", metavar="NAME=CSV")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("count-params", help="generator parameter count")
    _config_args(p)
    p.add_argument("--sweep", type=Path, help="sweep file; prints one count per grid point")
    return parser


def _cmd_prepare(args) -> int:
    files = prepare_data(parse_config(args.config, args.overrides), args.out)
    print(f"wrote {len(files)} volumes under {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    if args.steps is not None:
        cfg = replace(cfg, schedule=replace(cfg.schedule, warmup_steps=args.steps, adv_steps=args.steps))
    state = train_run(cfg, args.run_dir, resume=not args.fresh)
    print(f"trained to step {state.step} ({state.n_skipped} skipped); checkpoints in {args.run_dir / 'checkpoints'}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    state = finetune_run(cfg, args.run_dir, args.ckpt, args.adapt_channels, args.steps)
    print(f"fine-tuned to step {state.step} ({state.n_skipped} skipped)")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    reports = evaluate_run(cfg, args.run_dir, args.ckpt, args.baseline, args.sanity)
    for name, rep in reports.items():
        mean = rep.mean_row()
        print(f"{name}: " + ", ".join(f"{k}={v:.4f}" for k, v in mean.items() if k != "scale"))
    return 0


def _cmd_infer(args) -> int:
    sr = infer(args.ckpt, args.input, args.scale, args.out)
    print(f"wrote {args.out} with shape {tuple(sr.shape)}")
    return 0


def _cmd_report(args) -> int:
    inputs = []
    for item in args.inputs:
        if "=" not in item:
            raise ValueError(f"report input must look like NAME=CSV, got {item!r}")
        name, path = item.split("=", 1)
        inputs.append(ReportInput(name, Path(path)))
    for path in report(inputs, args.out):
        print(path)
    return 0


def _cmd_count(args) -> int:
    if args.sweep is not None:
        for point in parse_sweep(args.sweep):
            print(json.dumps({"point": point.label, "params": count_params(point.config.model.generator_config())}))
        return 0
    cfg = parse_config(args.config, args.overrides)
    print(count_params(cfg.model.generator_config()))
    return 0


COMMANDS = {
    "prepare-data": _cmd_prepare, "train": _cmd_train, "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate, "infer": _cmd_infer, "report": _cmd_report, "count-params": _cmd_count,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RunLocked as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 4
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
