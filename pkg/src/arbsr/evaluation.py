"""Scale-sweep evaluation, bicubic and up-and-down baselines, report files."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import Volume, check_scale, degrade, volume_slices
from .generator import Generator, generate
from .metrics import MetricReport, ScaleRow, fid, psnr, ssim
from .resample import bicubic_resize, floor_dim
from .training import check_scale_grid, default_scale_grid

SRModel = Callable[[np.ndarray, float], np.ndarray]


@dataclass
class EvalPlan:
    """What to evaluate: test volumes swept over a scale grid.

    ``train_ids`` lists the volume names used for training; the test split
    must not share any of them. ``sanity`` skips degradation and feeds HR
    slices straight to the model, so an identity model scores +inf PSNR.
    """
    volumes: list[Volume]
    scale_grid: tuple[float, ...] = field(default_factory=default_scale_grid)
    metrics: tuple[str, ...] = ("psnr", "ssim", "fid")
    embedder: Callable | None = None
    train_ids: tuple[str, ...] = ()
    out_dir: Path | None = None
    sanity: bool = False
    profile: str = ""
    checkpoint: str | None = None

    def __post_init__(self):
        self.scale_grid = check_scale_grid(self.scale_grid, "eval.scale_grid")
        if not self.volumes:
            raise ValueError("evaluation needs at least one test volume")
        overlap = {v.name for v in self.volumes} & set(self.train_ids)
        if overlap:
            raise ValueError(f"test volumes overlap the training split: {sorted(overlap)}")
        if "fid" in self.metrics and self.embedder is None:
            raise ValueError("FID requested but no embedder given")
        if "fid" in self.metrics and sum(v.n_slices for v in self.volumes) <= 1:
            raise ValueError("FID needs at least two test slices")

    @property
    def modality_names(self) -> list[str]:
        return list(self.volumes[0].modality_names)


class GeneratorModel:
    """Adapts a Generator to the (lr [m, H, W], s) -> sr [m, H', W'] protocol."""

    def __init__(self, generator: Generator):
        self.generator = generator.eval()

    @torch.no_grad()
    def __call__(self, lr: np.ndarray, s: float) -> np.ndarray:
        out = generate(lr, s, self.generator)
        return out.detach().cpu().numpy().astype(np.float64)


def bicubic_baseline(lr: np.ndarray, s: float) -> np.ndarray:
    s = check_scale(s)
    lr = np.asarray(lr, dtype=np.float64)
    out_shape = (floor_dim(s * lr.shape[-2]), floor_dim(s * lr.shape[-1]))
    return np.clip(bicubic_resize(lr, s, out_shape=out_shape), 0.0, 1.0)


@dataclass
class FixedScaleModelHandle:
    """An SR callable that only supports a fixed set of integer scales."""
    fn: Callable[[np.ndarray, int], np.ndarray]
    scales: tuple[int, ...] = (2, 3, 4)

    def __call__(self, lr: np.ndarray, s: int) -> np.ndarray:
        if s not in self.scales:
            raise ValueError(f"scale x{s} not supported; declared scales {self.scales}")
        return np.asarray(self.fn(lr, s), dtype=np.float64)


def up_and_down(handle: FixedScaleModelHandle, lr: np.ndarray, s: float) -> np.ndarray:
    """Super-resolve at ceil(s), then bicubic-shrink to (floor(s H), floor(s W))."""
    s = check_scale(s)
    up = math.ceil(s - 1e-9)
    if up not in handle.scales:
        raise ValueError(f"ceiling scale x{up} of s={s} not among declared scales {handle.scales}")
    big = handle(lr, up)
    target = (floor_dim(s * lr.shape[-2]), floor_dim(s * lr.shape[-1]))
    if big.shape[-2:] == target:
        return big
    return np.clip(bicubic_resize(big, s / up, out_shape=target), 0.0, 1.0)


class UpAndDownModel:
    def __init__(self, handle: FixedScaleModelHandle):
        self.handle = handle

    def __call__(self, lr: np.ndarray, s: float) -> np.ndarray:
        return up_and_down(self.handle, lr, s)


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _pairs(slices: list[np.ndarray], s: float, sanity: bool):
    for hr in slices:
        if sanity:
            yield hr, hr
            continue
        lr = degrade(hr, s)
        yield lr, hr[..., :floor_dim(s * lr.shape[-2]), :floor_dim(s * lr.shape[-1])]


def evaluate_scale(plan: EvalPlan, model: SRModel, s: float) -> ScaleRow:
    slices = volume_slices(plan.volumes)
    names = plan.modality_names
    per_mod_psnr = [[] for _ in names]
    per_mod_ssim = [[] for _ in names]
    srs, hrs = [], []
    for lr, hr in _pairs(slices, s, plan.sanity):
        sr = np.asarray(model(lr, s), dtype=np.float64)
        if sr.shape != hr.shape:
            raise ValueError(f"model output {sr.shape} does not match HR {hr.shape} at s={s}")
        for c in range(len(names)):
            if "psnr" in plan.metrics:
                per_mod_psnr[c].append(psnr(sr[c], hr[c]))
            if "ssim" in plan.metrics:
                per_mod_ssim[c].append(ssim(sr[c], hr[c]))
        srs.append(sr)
        hrs.append(hr)

    extra: dict[str, float] = {}
    mod_psnr = [float(np.mean(v)) if v else math.nan for v in per_mod_psnr]
    mod_ssim = [float(np.mean(v)) if v else math.nan for v in per_mod_ssim]
    mod_fid = [math.nan] * len(names)
    if "fid" in plan.metrics:
        mod_fid = [fid([x[c:c + 1] for x in srs], [x[c:c + 1] for x in hrs], plan.embedder)
                   for c in range(len(names))]
    if len(names) > 1:
        for c, name in enumerate(names):
            extra[f"psnr_{name}"] = mod_psnr[c]
            extra[f"ssim_{name}"] = mod_ssim[c]
            extra[f"fid_{name}"] = mod_fid[c]
    return ScaleRow(s, float(np.mean(mod_psnr)), float(np.mean(mod_ssim)), float(np.mean(mod_fid)), extra)


def evaluate(plan: EvalPlan, model: SRModel, name: str = "model") -> MetricReport:
    """One row per grid scale; PSNR/SSIM averaged over slices, FID per scale.

    Multi-modality volumes get per-modality columns; the main columns then
    hold the mean over modalities.
    """
    module = getattr(model, "generator", None)
    before = state_hash(module) if module is not None else None
    rows = [evaluate_scale(plan, model, s) for s in plan.scale_grid]
    if module is not None and state_hash(module) != before:
        raise RuntimeError("evaluation modified model parameters")
    n = len(plan.volumes[0].modality_names)
    meta = {
        "model": name,
        "profile": plan.profile,
        "checkpoint": plan.checkpoint,
        "n_slices": int(sum(v.n_slices for v in plan.volumes)),
        "modalities": plan.modality_names if n > 1 else plan.modality_names[:1],
        "volumes": [v.name for v in plan.volumes],
        "metrics": list(plan.metrics),
        "sanity": plan.sanity,
    }
    if plan.sanity:
        meta["note"] = "sanity mode: HR slices fed to the model without degradation"
    report = MetricReport(rows, meta)
    if plan.out_dir is not None:
        render_report(report, plan.out_dir, name)
    return report


# -- reports ----------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return v


def plot_series(reports: dict[str, MetricReport]) -> dict:
    """Scale-vs-metric series per model over the union of scales (null where missing)."""
    scales = sorted({s for r in reports.values() for s in r.scales})
    series = {}
    for name, rep in reports.items():
        cols = ["psnr", "ssim", "fid"] + rep.extra_columns()
        by_scale = {round(r.scale, 9): r for r in rep.rows}
        entry = {}
        for col in cols:
            vals = []
            for s in scales:
                row = by_scale.get(round(s, 9))
                if row is None:
                    vals.append(None)
                else:
                    v = getattr(row, col) if col in ("psnr", "ssim", "fid") else row.extra.get(col)
                    vals.append(_jsonable(float(v)) if v is not None else None)
            entry[col] = vals
        series[name] = entry
    return {"scale": scales, "series": series}


def render_report(report: MetricReport | dict[str, MetricReport], out_dir, name: str = "model") -> list[Path]:
    """Write per-model CSV tables plus one plot-data JSON; content is deterministic."""
    reports = report if isinstance(report, dict) else {name: report}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for model_name, rep in reports.items():
        written.append(rep.write_csv(out_dir / f"{model_name}.csv"))
    plot_path = out_dir / "plot_data.json"
    plot_path.write_text(json.dumps(plot_series(reports), indent=2, sort_keys=True) + "\n")
    written.append(plot_path)
    if len(reports) > 1:
        written.append(_write_comparison(reports, out_dir / "comparison.csv"))
    return written


def _write_comparison(reports: dict[str, MetricReport], path: Path) -> Path:
    import csv
    data = plot_series(reports)
    names = list(reports)
    header = ["scale"] + [f"{n}:{m}" for n in names for m in ("psnr", "ssim", "fid")]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for i, s in enumerate(data["scale"]):
            row = [repr(float(s))]
            for n in names:
                for m in ("psnr", "ssim", "fid"):
                    v = data["series"][n][m][i]
                    row.append("" if v is None else (v if isinstance(v, str) else repr(float(v))))
            w.writerow(row)
    return path
