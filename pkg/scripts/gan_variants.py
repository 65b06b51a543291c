"""Smoke-test every adversarial objective on the desk preset.

Each variant runs a short warm-up and adversarial phase on phantoms and must
finish with finite losses and no aborted steps.

    python scripts/gan_variants.py [--steps 50]
"""
from __future__ import annotations

import argparse
import math
import sys
import tempfile
from dataclasses import replace

from arbsr.config import parse_config
from arbsr.losses import VARIANTS
from arbsr.runner import train_run


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="tiny")
    p.add_argument("--steps", type=int, default=50)
    args = p.parse_args(argv)
    ok = True
    for variant in VARIANTS:
        cfg = parse_config(args.config, [f"loss.variant={variant}"])
        if variant == "wgan":
            cfg = replace(cfg, loss=replace(cfg.loss, clip_value=0.01))
        cfg = replace(cfg, schedule=replace(cfg.schedule, warmup_steps=args.steps, adv_steps=args.steps))
        with tempfile.TemporaryDirectory() as d:
            state = train_run(cfg, d, resume=False)
        losses = state.log.column("total", "adversarial")
        good = all(math.isfinite(v) for v in losses) and state.n_skipped == 0
        ok &= good
        print(f"{variant:<8} {'ok' if good else 'FAILED'}  last total {losses[-1]:.4g}  "
              f"skipped {state.n_skipped}", flush=True)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
