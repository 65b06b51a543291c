"""Expand a sweep file; print parameter counts and optionally train each point briefly.

    python scripts/sweep.py configs/sweep_width.yaml
    python scripts/sweep.py configs/sweep_variant.yaml --train-steps 50 --out runs/variant
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from arbsr.config import parse_sweep
from arbsr.generator import count_params
from arbsr.runner import train_run


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("sweep", type=Path)
    p.add_argument("--train-steps", type=int, default=0, help="warm-up and adversarial steps per point")
    p.add_argument("--out", type=Path, default=Path("runs/sweep"))
    args = p.parse_args(argv)
    for i, point in enumerate(parse_sweep(args.sweep)):
        line = f"{point.label:<28} params {count_params(point.config.model.generator_config()):>10,}"
        if args.train_steps:
            cfg = replace(point.config, schedule=replace(point.config.schedule, warmup_steps=args.train_steps,
                                                         adv_steps=args.train_steps))
            state = train_run(cfg, args.out / f"point{i:02d}", resume=False)
            line += f"  final loss {state.log.rows[-1]['total']:.4g}  skipped {state.n_skipped}"
        print(line, flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
