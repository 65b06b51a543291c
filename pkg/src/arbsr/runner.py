"""Run directories and the end-to-end jobs behind the command line.

A run directory holds everything one experiment produces::

    config.yaml          canonical dump of the validated configuration
    manifest.json        sha256 and size of every artifact, plus job history
    checkpoints/         warmup / latest / final training states
    logs/                train_log.csv, critic_log.csv
    reports/             metric tables and plot data

Only one process may work on a run directory at a time (``.lock``).
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import atomic_write_bytes, code_version, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import (DataError, FixedPatchSet, Volume, VolumePatchSampler, get_profile, load_volume,
                   phantom_profile, read_raw, synth_phantom, volume_from_array, write_raw)
from .evaluation import (EvalPlan, GeneratorModel, bicubic_baseline, evaluate, render_report)
from .features import build_embedder, build_extractor
from .generator import Generator, GeneratorConfig, generate
from .metrics import MetricReport
from .training import (TrainState, adversarial_train, configure_determinism, finetune, load_state,
                       new_state, warmup_train)

LOCK_NAME = ".lock"
MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.yaml"
# phantom volume seeds: train seed*STRIDE + i, test offset by TEST_OFFSET
PHANTOM_STRIDE = 10007
PHANTOM_TEST_OFFSET = 5000


class RunLocked(RuntimeError):
    pass


class RunDirectory:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints / f"{name}.safetensors"

    @contextlib.contextmanager
    def lock(self):
        path = self.root / LOCK_NAME
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(f"run directory {self.root} is in use (lock file {path}); "
                            "remove it if no other process is running") from None
        try:
            os.write(fd, f"{os.getpid()}\n".encode())
            os.close(fd)
            yield self
        finally:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(path)

    def write_config(self, cfg: RunConfig) -> Path:
        return atomic_write_bytes(self.root / CONFIG_NAME, cfg.dump().encode())

    def read_manifest(self) -> dict:
        path = self.root / MANIFEST_NAME
        if not path.exists():
            return {"files": {}, "jobs": []}
        return json.loads(path.read_text())

    def update_manifest(self, job: str, info: dict | None = None) -> Path:
        manifest = self.read_manifest()
        files = {}
        for f in sorted(self.root.rglob("*")):
            rel = f.relative_to(self.root).as_posix()
            if not f.is_file() or rel in (LOCK_NAME, MANIFEST_NAME) or f.name.endswith(".tmp"):
                continue
            files[rel] = {"sha256": _sha256(f), "bytes": f.stat().st_size}
        manifest["files"] = files
        manifest["code_version"] = code_version()
        manifest["jobs"].append({"job": job, "time": time.strftime("%Y-%m-%dT%H:%M:%S"), **(info or {})})
        payload = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        return atomic_write_bytes(self.root / MANIFEST_NAME, payload.encode())


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- data -------------------------------------------------------------------

def dtype_of(cfg: RunConfig) -> torch.dtype:
    return getattr(torch, cfg.model.precision)


def is_phantom(cfg: RunConfig) -> bool:
    return cfg.data.profile.startswith("phantom")


def phantom_shape(cfg: RunConfig) -> tuple[int, int]:
    p = get_profile(cfg.data.profile)
    return (4 * p.crop_height) // 3, (4 * p.crop_width) // 3


def phantom_volumes(cfg: RunConfig, split: str) -> list[Volume]:
    shape = phantom_shape(cfg)
    profile = phantom_profile(shape, cfg.model.channels)
    n = cfg.data.phantom_train if split == "train" else cfg.data.phantom_test
    base = cfg.data.seed * PHANTOM_STRIDE + (0 if split == "train" else PHANTOM_TEST_OFFSET)
    out = []
    for i in range(n):
        raw = synth_phantom(base + i, shape, cfg.data.phantom_slices, cfg.model.channels)
        out.append(volume_from_array(raw.voxels, profile, name=raw.name))
    return out


def build_volumes(cfg: RunConfig, split: str = "train") -> list[Volume]:
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if is_phantom(cfg):
        return phantom_volumes(cfg, split)
    paths = cfg.data.paths if split == "train" else cfg.data.test_paths
    key = "data.paths" if split == "train" else "data.test_paths"
    if not paths:
        raise ConfigError(key, f"profile {cfg.data.profile!r} needs volume files")
    profile = get_profile(cfg.data.profile)
    if profile.channels != cfg.model.channels:
        raise ConfigError("model.channels", f"profile {profile.name} has {profile.channels} modalities")
    return [load_volume(p, profile) for p in paths]


def build_sampler(cfg: RunConfig, volumes: list[Volume]):
    if cfg.data.fixed_patches > 0:
        return FixedPatchSet.from_volumes(volumes, cfg.data.patch_size, cfg.data.fixed_patches, cfg.data.seed)
    return VolumePatchSampler(volumes, cfg.data.patch_size, cfg.schedule.batch_size)


def prepare_data(cfg: RunConfig, out_dir) -> list[Path]:
    """Write the train/test corpora as portable volume files."""
    out_dir = Path(out_dir)
    written = []
    for split in ("train", "test"):
        d = out_dir / split
        d.mkdir(parents=True, exist_ok=True)
        for vol in build_volumes(cfg, split):
            written.append(write_raw(d / f"{vol.name}.vol", vol.voxels, vol.modality_names))
    return written


def build_perceptual(cfg: RunConfig):
    if cfg.loss.weights().effective()[2] == 0:
        return None
    return build_extractor(cfg.loss.perceptual, cfg.loss.perceptual_layer, cfg.loss.perceptual_weights,
                           seed=cfg.data.seed)


# -- training ---------------------------------------------------------------

class _Stop(Exception):
    pass


def _state_matches(state: TrainState, cfg: RunConfig) -> None:
    if state.generator.config != cfg.model.generator_config():
        raise ConfigError("model", "resume checkpoint was trained with a different model section")
    if state.schedule.seed != cfg.schedule.seed:
        raise ConfigError("schedule.seed", "resume checkpoint was trained with a different seed")


def train_run(cfg: RunConfig, run_dir, resume: bool = True, max_steps: int | None = None) -> TrainState:
    """Warm-up then adversarial training, checkpointing into the run directory.

    With ``resume`` an existing ``latest`` checkpoint is continued. ``max_steps``
    stops (after checkpointing) once the global step reaches it.
    """
    run = RunDirectory(run_dir)
    with run.lock():
        configure_determinism()
        run.write_config(cfg)
        latest = run.checkpoint("latest")
        if resume and latest.exists():
            state = load_state(latest, cfg.schedule, log_dir=run.logs)
            _state_matches(state, cfg)
        else:
            for stale in (run.logs / "train_log.csv", run.logs / "critic_log.csv"):
                stale.unlink(missing_ok=True)
            state = new_state(cfg.model.generator_config(), cfg.schedule,
                              cfg.critic.critic_config(cfg.model.channels), dtype_of(cfg),
                              cfg.model.init, log_dir=run.logs)
        data = build_sampler(cfg, build_volumes(cfg, "train"))
        every = cfg.schedule.checkpoint_every

        def on_step(st: TrainState) -> None:
            if every and st.step % every == 0:
                st.save(latest)
            if max_steps is not None and st.step >= max_steps:
                st.save(latest)
                raise _Stop

        try:
            n_warm = cfg.schedule.warmup_steps - state.phase_steps["warmup"]
            if state.phase == "warmup" and n_warm > 0:
                warmup_train(state, data, n_warm, on_step=on_step)
            if state.phase == "warmup":
                state.save(run.checkpoint("warmup"))
            n_adv = cfg.schedule.adv_steps - state.phase_steps["adversarial"]
            if n_adv > 0:
                adversarial_train(state, data, cfg.loss.variant, cfg.loss.weights(), build_perceptual(cfg),
                                  n_adv, cfg.loss.gp_weight, cfg.loss.clip_value, on_step=on_step)
            state.save(latest)
            state.save(run.checkpoint("final"))
        except _Stop:
            pass
        run.update_manifest("train", {"step": state.step, "phase": state.phase,
                                      "n_skipped": state.n_skipped})
    return state


def finetune_run(cfg: RunConfig, run_dir, checkpoint, adapt_channels: bool = False,
                 steps: int | None = None) -> TrainState:
    """Transfer a pretrained checkpoint to this config's data, then fine-tune."""
    run = RunDirectory(run_dir)
    with run.lock():
        configure_determinism()
        run.write_config(cfg)
        data = build_sampler(cfg, build_volumes(cfg, "train"))
        target = cfg.model.generator_config()
        state = finetune(checkpoint, data, cfg.schedule, cfg.loss.variant, cfg.loss.weights(),
                         build_perceptual(cfg), target=target, adapt_channels=adapt_channels,
                         critic_config=cfg.critic.critic_config(cfg.model.channels), steps=steps,
                         gp_weight=cfg.loss.gp_weight, log_dir=run.logs, dtype=dtype_of(cfg))
        state.save(run.checkpoint("finetuned"), {"source_checkpoint": str(checkpoint)})
        run.update_manifest("finetune", {"source": str(checkpoint), "step": state.step,
                                         "adapt_channels": adapt_channels})
    return state


# -- models and evaluation --------------------------------------------------

def load_generator(path, dtype: torch.dtype | None = None) -> Generator:
    tensors, meta = load_checkpoint(path)
    if "generator" not in meta:
        raise ValueError(f"{path} holds no generator configuration")
    dtype = dtype or getattr(torch, meta.get("dtype", "float32"))
    gen = Generator(GeneratorConfig(**meta["generator"])).to(dtype)
    own = {k: v for k, v in tensors.items() if not k.startswith(("critic.", "optim."))}
    gen.load_state_dict({k: v.to(dtype) for k, v in own.items()})
    return gen.eval()


def save_generator(path, gen: Generator, extra: dict | None = None) -> Path:
    meta = {"kind": "generator", "generator": gen.config.to_dict(),
            "dtype": str(gen.head.weight.dtype).replace("torch.", ""), "code_version": code_version()}
    meta.update(extra or {})
    return save_checkpoint(path, gen.state_dict(), meta)


def build_eval_plan(cfg: RunConfig, out_dir=None, sanity: bool = False, checkpoint=None) -> EvalPlan:
    embedder = None
    if "fid" in cfg.eval.metrics:
        embedder = build_embedder(cfg.eval.embedding, cfg.eval.embedding_weights, seed=cfg.data.seed)
    train_ids = tuple(v.name for v in build_volumes(cfg, "train")) if is_phantom(cfg) else \
        tuple(Path(p).stem for p in cfg.data.paths)
    return EvalPlan(build_volumes(cfg, "test"), cfg.eval.scale_grid, cfg.eval.metrics, embedder,
                    train_ids, out_dir, sanity, cfg.data.profile,
                    None if checkpoint is None else str(checkpoint))


def evaluate_run(cfg: RunConfig, run_dir, checkpoint=None, baseline: str | None = None,
                 sanity: bool = False) -> dict[str, MetricReport]:
    """Evaluate the run's final generator (or ``checkpoint``) and optional baseline."""
    run = RunDirectory(run_dir)
    with run.lock():
        ckpt = Path(checkpoint) if checkpoint else run.checkpoint("final")
        plan = build_eval_plan(cfg, None, sanity, ckpt)
        reports = {"model": evaluate(plan, GeneratorModel(load_generator(ckpt, dtype_of(cfg))), "model")}
        if baseline == "bicubic":
            reports["bicubic"] = evaluate(replace(plan, checkpoint=None), bicubic_baseline, "bicubic")
        elif baseline is not None:
            raise ValueError(f"unknown baseline {baseline!r}; available: bicubic")
        render_report(reports, run.reports)
        run.update_manifest("evaluate", {"checkpoint": str(ckpt), "models": list(reports)})
    return reports


def read_slice(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
    elif path.suffix == ".vol":
        arr, _ = read_raw(path)
    else:
        raise DataError(f"unsupported slice file {path}; use .npy or .vol")
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise DataError(f"{path}: expected [H, W] or [m, H, W], got shape {arr.shape}")
    return arr


def infer(checkpoint, in_path, scale: float, out_path) -> np.ndarray:
    """Super-resolve one slice file and write the result as .npy."""
    gen = load_generator(checkpoint)
    lr = read_slice(in_path)
    with torch.no_grad():
        sr = generate(lr, scale, gen).cpu().numpy()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "wb") as f:
        np.save(f, sr)
    return sr


@dataclass
class ReportInput:
    name: str
    path: Path


def report(inputs: list[ReportInput], out_dir) -> list[Path]:
    reports = {i.name: MetricReport.read_csv(i.path) for i in inputs}
    return render_report(reports, out_dir)
