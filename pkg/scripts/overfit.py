"""Memorisation check: train the overfit config and report train PSNR per scale.

    python scripts/overfit.py [--config configs/overfit.yaml] [--run-dir runs/overfit]
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from arbsr.config import parse_config
from arbsr.evaluation import bicubic_baseline
from arbsr.generator import generate
from arbsr.metrics import psnr
from arbsr.runner import build_sampler, build_volumes, train_run

ROOT = Path(__file__).resolve().parent.parent


def train_psnr(cfg, generator) -> list[tuple[float, float, float]]:
    """(scale, model PSNR, bicubic PSNR), PSNR averaged over the fixed patches."""
    data = build_sampler(cfg, build_volumes(cfg, "train"))
    rows = []
    for s in cfg.schedule.scale_grid:
        batch = data.sample(s)
        with torch.no_grad():
            sr = generate(torch.as_tensor(batch.lr, dtype=generator.head.weight.dtype), s, generator).numpy()
        bic = np.stack([bicubic_baseline(x, s) for x in batch.lr])
        rows.append((s, float(np.mean([psnr(a, b) for a, b in zip(sr, batch.hr)])),
                     float(np.mean([psnr(a, b) for a, b in zip(bic, batch.hr)]))))
    return rows


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "overfit.yaml"))
    p.add_argument("--run-dir", default=str(ROOT / "runs" / "overfit"))
    p.add_argument("--threshold", type=float, default=40.0)
    args = p.parse_args(argv)
    cfg = parse_config(args.config)
    state = train_run(cfg, args.run_dir, resume=False)
    ok = True
    for s, model, bic in train_psnr(cfg, state.generator):
        ok &= model > args.threshold
        print(f"s={s:.2f}  model {model:6.2f} dB  bicubic {bic:6.2f} dB")
    print("PASS" if ok else "FAIL", f"(threshold {args.threshold} dB, {state.n_skipped} skipped steps)")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
