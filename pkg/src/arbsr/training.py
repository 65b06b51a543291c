"""Two-phase optimisation: L1 warm-up, adversarial training, fine-tuning.

Every per-step random draw (scale, patch batch, interpolation weights) is a
pure function of ``(seed, step)``. Resuming therefore needs no RNG state,
only parameters, Adam moments and the step counters.
"""
from __future__ import annotations

import csv
import math
import os
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import code_version, load_checkpoint, module_tensors, save_checkpoint, split_prefix
from .critic import Critic, CriticConfig, build_critic
from .data import SCALE_MAX, SCALE_MIN
from .generator import Generator, GeneratorConfig, build_generator
from .init import init_layer, init_weights  # noqa: F401  (re-exported)
from .losses import (LossWeights, VARIANTS, clip_weights, combined_loss, discriminator_loss, gradient_penalty,
                     scorer, wgan_d)

DETERMINISTIC_ENV = "ARBSR_DETERMINISTIC"
NONFINITE_ABORT_FRACTION = 0.01
PHASES = ("warmup", "adversarial", "finetune")

# stream ids for per-step RNG derivation
_DATA, _SCALE, _GP = 0, 1, 2

LossHook = Callable[[int, torch.Tensor], torch.Tensor]


def default_scale_grid() -> tuple[float, ...]:
    return tuple(round(1.0 + 0.1 * i, 1) for i in range(1, 31))


def check_scale_grid(grid, key: str = "scale_grid") -> tuple[float, ...]:
    grid = tuple(float(s) for s in grid)
    if not grid:
        raise ValueError(f"{key} must not be empty")
    for s in grid:
        if not (SCALE_MIN < s <= SCALE_MAX):
            raise ValueError(f"{key} entry {s} outside (1, 4]")
    return grid


@dataclass(frozen=True)
class TrainSchedule:
    warmup_steps: int = 100_000
    adv_steps: int = 100_000
    finetune_steps: int = 10_000
    batch_size: int = 16
    lr0: float = 1e-4
    lr_halving_period: int = 50_000
    adam_betas: tuple[float, float] = (0.9, 0.999)
    loss_guard: float = 1e8
    scale_grid: tuple[float, ...] = field(default_factory=default_scale_grid)
    seed: int = 0
    n_critic: int = 1
    continuous_scales: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scale_grid", check_scale_grid(self.scale_grid))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        for name in ("warmup_steps", "adv_steps", "finetune_steps", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_size", "lr_halving_period", "n_critic"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if len(self.adam_betas) != 2 or not all(0.0 <= b < 1.0 for b in self.adam_betas):
            raise ValueError("adam_betas must be two values in [0, 1)")
        if not self.loss_guard >= 0:
            raise ValueError("loss_guard must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["scale_grid"] = list(self.scale_grid)
        return d


def lr_at(step: int, schedule: TrainSchedule) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return schedule.lr0 * 2.0 ** (-(step // schedule.lr_halving_period))


def sample_scale(rng: np.random.Generator, scale_grid, continuous: bool = False) -> float:
    """Uniform over the grid, or over [min, max] of the grid when ``continuous``."""
    grid = tuple(scale_grid)
    if not grid:
        raise ValueError("empty scale grid")
    if continuous:
        lo, hi = min(grid), max(grid)
        return float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return float(grid[int(rng.integers(len(grid)))])


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step])


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "1").lower() not in ("0", "false", "no", "off")


def configure_determinism(enabled: bool | None = None) -> bool:
    enabled = deterministic_mode() if enabled is None else enabled
    torch.use_deterministic_algorithms(enabled, warn_only=False)
    return enabled


class TrainingAborted(RuntimeError):
    pass


# -- logging ----------------------------------------------------------------

LOG_COLUMNS = ("step", "phase", "scale", "l1", "adv", "perc", "total", "lr", "skipped")
CRITIC_COLUMNS = ("step", "phase", "d_loss", "grad_norm", "skipped")


class CsvLog:
    """In-memory rows mirrored to an append-only CSV file when a path is given."""

    def __init__(self, columns: tuple[str, ...], path=None):
        self.columns = columns
        self.rows: list[dict] = []
        self.path = None
        self._lock = threading.Lock()
        if path is not None:
            self.attach(path)

    def append(self, **row) -> None:
        rec = {c: row[c] for c in self.columns}
        with self._lock:
            self.rows.append(rec)
            if self.path is not None:
                with open(self.path, "a", newline="") as f:
                    csv.writer(f, lineterminator="\n").writerow(
                        [repr(v) if isinstance(v, float) else v for v in rec.values()])

    def column(self, name: str, phase: str | None = None) -> list:
        return [r[name] for r in self.rows if phase is None or r["phase"] == phase]

    def attach(self, path, before_step: int | None = None) -> None:
        """Start mirroring to ``path`` (header written if the file is new).

        With ``before_step``, rows logged at or after that step are dropped
        from an existing file, so a resumed run does not repeat them.
        """
        self.path = Path(path)
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(self.columns)
            return
        if before_step is None:
            return
        with open(self.path, newline="") as f:
            rows = list(csv.reader(f))
        kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) < before_step]
        with open(self.path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows(kept)


# -- state ------------------------------------------------------------------

def _adam(params, schedule: TrainSchedule) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=schedule.lr0, betas=schedule.adam_betas)


@dataclass
class TrainState:
    generator: Generator
    opt_g: torch.optim.Adam
    schedule: TrainSchedule
    critic: Critic | None = None
    opt_c: torch.optim.Adam | None = None
    step: int = 0
    phase: str = "warmup"
    phase_steps: dict[str, int] = field(default_factory=lambda: {p: 0 for p in PHASES})
    n_skipped: int = 0
    n_nonfinite: int = 0
    log: CsvLog = field(default_factory=lambda: CsvLog(LOG_COLUMNS))
    critic_log: CsvLog = field(default_factory=lambda: CsvLog(CRITIC_COLUMNS))

    @property
    def dtype(self) -> torch.dtype:
        return self.generator.head.weight.dtype

    def tensors(self) -> dict[str, torch.Tensor]:
        out = module_tensors(self.generator)
        out.update(_optimizer_tensors(self.opt_g, self.generator, "optim.generator."))
        if self.critic is not None:
            out.update(module_tensors(self.critic, "critic."))
            out.update(_optimizer_tensors(self.opt_c, self.critic, "optim.critic."))
        return out

    def metadata(self, extra: dict | None = None) -> dict:
        meta = {
            "kind": "train_state",
            "step": self.step,
            "phase": self.phase,
            "phase_steps": dict(self.phase_steps),
            "n_skipped": self.n_skipped,
            "n_nonfinite": self.n_nonfinite,
            "seed": self.schedule.seed,
            "generator": self.generator.config.to_dict(),
            "critic": None if self.critic is None else self.critic.config.to_dict(),
            "schedule": self.schedule.to_dict(),
            "dtype": str(self.dtype).replace("torch.", ""),
            "code_version": code_version(),
        }
        if extra:
            meta.update(extra)
        return meta

    def save(self, path, extra: dict | None = None) -> Path:
        return save_checkpoint(path, self.tensors(), self.metadata(extra))


def _optimizer_tensors(opt, module, prefix: str) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in module.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            out[f"{prefix}{name}.{key}"] = torch.as_tensor(st[key]).reshape(p.shape if key != "step" else ())
    return out


def _restore_optimizer(opt, module, tensors: dict, prefix: str) -> None:
    sd = opt.state_dict()
    state = {}
    for idx, (name, _) in enumerate(module.named_parameters()):
        key = f"{prefix}{name}."
        if key + "step" in tensors:
            state[idx] = {k: tensors[key + k].clone() for k in ("step", "exp_avg", "exp_avg_sq")}
    sd["state"] = state
    opt.load_state_dict(sd)


def new_state(gen_config: GeneratorConfig, schedule: TrainSchedule, critic_config: CriticConfig | None = None,
              dtype: torch.dtype = torch.float32, scheme: str = "kaiming-uniform", log_dir=None) -> TrainState:
    gen = build_generator(gen_config, seed=schedule.seed, scheme=scheme, dtype=dtype)
    critic = opt_c = None
    if critic_config is not None:
        critic = build_critic(critic_config, seed=schedule.seed + 1, scheme=scheme, dtype=dtype)
        opt_c = _adam(critic.parameters(), schedule)
    state = TrainState(gen, _adam(gen.parameters(), schedule), schedule, critic, opt_c)
    if log_dir is not None:
        attach_logs(state, log_dir)
    return state


def attach_logs(state: TrainState, log_dir) -> None:
    log_dir = Path(log_dir)
    state.log.attach(log_dir / "train_log.csv", before_step=state.step)
    state.critic_log.attach(log_dir / "critic_log.csv", before_step=state.step)


def load_state(path, schedule: TrainSchedule | None = None, log_dir=None) -> TrainState:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "train_state":
        raise ValueError(f"{path} is not a training-state checkpoint")
    dtype = getattr(torch, meta["dtype"])
    schedule = schedule or TrainSchedule(**meta["schedule"])
    gen = Generator(GeneratorConfig(**meta["generator"])).to(dtype)
    gen.load_state_dict(split_prefix_exclusive(tensors, ("critic.", "optim.")))
    opt_g = _adam(gen.parameters(), schedule)
    _restore_optimizer(opt_g, gen, tensors, "optim.generator.")
    critic = opt_c = None
    if meta.get("critic"):
        critic = Critic(CriticConfig(**meta["critic"])).to(dtype)
        critic.load_state_dict(split_prefix(tensors, "critic."))
        opt_c = _adam(critic.parameters(), schedule)
        _restore_optimizer(opt_c, critic, tensors, "optim.critic.")
    state = TrainState(gen, opt_g, schedule, critic, opt_c, step=meta["step"], phase=meta["phase"],
                       phase_steps=dict(meta["phase_steps"]), n_skipped=meta["n_skipped"],
                       n_nonfinite=meta["n_nonfinite"])
    if log_dir is not None:
        attach_logs(state, log_dir)
    return state


def split_prefix_exclusive(tensors: dict, prefixes: tuple[str, ...]) -> dict:
    return {k: v for k, v in tensors.items() if not k.startswith(prefixes)}


# -- steps ------------------------------------------------------------------

def _apply(opt, loss: torch.Tensor, lr: float, guard: float) -> str:
    """Backprop and step unless the loss is non-finite or above the guard."""
    value = float(loss.detach())
    if not math.isfinite(value):
        return "nonfinite"
    if value > guard:
        return "guard"
    opt.zero_grad(set_to_none=True)
    loss.backward()
    for group in opt.param_groups:
        group["lr"] = lr
    opt.step()
    return "ok"


def _record_outcome(state: TrainState, outcome: str) -> None:
    if outcome == "ok":
        return
    state.n_skipped += 1
    if outcome == "nonfinite":
        state.n_nonfinite += 1
        if state.n_nonfinite > NONFINITE_ABORT_FRACTION * max(state.step + 1, 100):
            raise TrainingAborted(
                f"{state.n_nonfinite} non-finite losses by step {state.step}: above "
                f"{NONFINITE_ABORT_FRACTION:.0%} of steps")


def _draw(state: TrainState, data):
    sched = state.schedule
    s = sample_scale(step_rng(sched.seed, state.step, _SCALE), sched.scale_grid, sched.continuous_scales)
    batch = data.sample(s, [sched.seed, _DATA, state.step])
    lr = torch.as_tensor(batch.lr, dtype=state.dtype)
    hr = torch.as_tensor(batch.hr, dtype=state.dtype)
    return s, lr, hr


def _gp_generator(state: TrainState) -> torch.Generator:
    seed = int(step_rng(state.schedule.seed, state.step, _GP).integers(2 ** 62))
    return torch.Generator().manual_seed(seed)


def _log_step(state: TrainState, s: float, parts: dict, total: torch.Tensor, lr: float, outcome: str) -> None:
    state.log.append(step=state.step, phase=state.phase, scale=s,
                     l1=float(parts["l1"]), adv=float(parts["adv"]), perc=float(parts["perc"]),
                     total=float(total.detach()), lr=lr, skipped=int(outcome != "ok"))


def _advance(state: TrainState, on_step) -> None:
    state.step += 1
    state.phase_steps[state.phase] += 1
    if on_step is not None:
        on_step(state)


def warmup_step(state: TrainState, data, loss_hook: LossHook | None = None) -> None:
    s, lr_img, hr = _draw(state, data)
    lr = lr_at(state.phase_steps[state.phase], state.schedule)
    sr = state.generator(lr_img, s)
    total, parts = combined_loss(sr, hr, None, None, LossWeights(1.0, 0.0, 0.0))
    if loss_hook is not None:
        total = loss_hook(state.step, total)
    outcome = _apply(state.opt_g, total, lr, state.schedule.loss_guard)
    _log_step(state, s, parts, total, lr, outcome)
    _record_outcome(state, outcome)


def adversarial_step(state: TrainState, data, variant: str, weights: LossWeights, V=None,
                     gp_weight: float = 10.0, clip_value: float | None = None,
                     loss_hook: LossHook | None = None) -> None:
    if state.critic is None:
        raise ValueError("adversarial training needs a critic")
    s, lr_img, hr = _draw(state, data)
    lr = lr_at(state.phase_steps[state.phase], state.schedule)
    guard = state.schedule.loss_guard
    D = scorer(state.critic, variant)
    sr = state.generator(lr_img, s)

    gp_gen = _gp_generator(state)
    for _ in range(state.schedule.n_critic):
        norm = math.nan
        if variant == "wgangp":
            penalty, norms = gradient_penalty(D, sr.detach(), hr, generator=gp_gen)
            d_loss = wgan_d(D, sr.detach(), hr) + gp_weight * penalty
            norm = float(norms.mean())
        else:
            d_loss = discriminator_loss(variant, D, sr, hr, gp_weight)
        outcome = _apply(state.opt_c, d_loss, lr, guard)
        if clip_value is not None and outcome == "ok":
            clip_weights(state.critic, clip_value)
        state.critic_log.append(step=state.step, phase=state.phase, d_loss=float(d_loss.detach()),
                                grad_norm=norm, skipped=int(outcome != "ok"))

    state.critic.requires_grad_(False)
    try:
        total, parts = combined_loss(sr, hr, D, V, weights, variant)
        if loss_hook is not None:
            total = loss_hook(state.step, total)
        outcome = _apply(state.opt_g, total, lr, guard)
    finally:
        state.critic.requires_grad_(True)
    _log_step(state, s, parts, total, lr, outcome)
    _record_outcome(state, outcome)


def warmup_train(state: TrainState, data, steps: int | None = None, loss_hook: LossHook | None = None,
                 on_step=None) -> TrainState:
    """L1-only phase; ``steps`` defaults to the schedule's warm-up length."""
    state.phase = "warmup"
    n = state.schedule.warmup_steps if steps is None else steps
    for _ in range(n):
        warmup_step(state, data, loss_hook)
        _advance(state, on_step)
    return state


def adversarial_train(state: TrainState, data, variant: str = "wgangp", weights: LossWeights = LossWeights(),
                      V=None, steps: int | None = None, gp_weight: float = 10.0, clip_value: float | None = None,
                      loss_hook: LossHook | None = None, on_step=None, phase: str = "adversarial") -> TrainState:
    if variant not in VARIANTS:
        raise ValueError(f"unknown adversarial variant {variant!r}; expected one of {VARIANTS}")
    if weights.effective()[2] > 0 and V is None:
        raise ValueError("perceptual term enabled but no feature extractor given")
    state.phase = phase
    default = state.schedule.finetune_steps if phase == "finetune" else state.schedule.adv_steps
    n = default if steps is None else steps
    for _ in range(n):
        adversarial_step(state, data, variant, weights, V, gp_weight, clip_value, loss_hook)
        _advance(state, on_step)
    return state


# -- transfer ---------------------------------------------------------------

TRANSFER_REINIT = ("head.", "meta_net.2.")
_ARCH_FIELDS = ("depth", "width", "kernel_size", "meta_hidden", "res_scale")


def transfer_generator(tensors: dict, source: GeneratorConfig, target: GeneratorConfig, seed: int = 0,
                       dtype: torch.dtype = torch.float32, scheme: str = "kaiming-uniform") -> tuple[Generator, list[str]]:
    """Load every channel-independent tensor; freshly initialise the rest.

    Returns the generator and the names of the reinitialised tensors.
    """
    for name in _ARCH_FIELDS:
        a, b = getattr(source, name), getattr(target, name)
        if a != b:
            raise ValueError(f"checkpoint {name}={a} is incompatible with requested {name}={b}")
    gen = build_generator(target, seed=seed, scheme=scheme, dtype=dtype)
    own = gen.state_dict()
    loaded, fresh = {}, []
    for name, value in own.items():
        if source.channels != target.channels and name.startswith(TRANSFER_REINIT):
            fresh.append(name)
            loaded[name] = value
        else:
            loaded[name] = tensors[name].to(dtype)
    gen.load_state_dict(loaded)
    return gen, fresh


def finetune(checkpoint, data, schedule: TrainSchedule, variant: str = "wgangp",
             weights: LossWeights = LossWeights(), V=None, target: GeneratorConfig | None = None,
             adapt_channels: bool = False, critic_config: CriticConfig | None = None,
             steps: int | None = None, gp_weight: float = 10.0, loss_hook: LossHook | None = None,
             on_step=None, log_dir=None, dtype: torch.dtype | None = None) -> TrainState:
    """Continue from a pretrained checkpoint on new data with the combined loss.

    Changing the channel count requires ``adapt_channels``; the input conv and
    the weight predictor's output layer are then re-initialised and everything
    else is copied bit for bit. Depth or width changes are always rejected.
    """
    tensors, meta = load_checkpoint(checkpoint)
    source = GeneratorConfig(**meta["generator"])
    target = target or replace(source, channels=data.channels)
    if target.channels != data.channels:
        raise ValueError(f"target has {target.channels} channels but the data has {data.channels}")
    if target.channels != source.channels and not adapt_channels:
        raise ValueError(f"checkpoint has {source.channels} channels, data has {target.channels}; "
                         "pass adapt_channels to re-initialise the channel-dependent layers")
    dtype = dtype or getattr(torch, meta.get("dtype", "float32"))
    gen, _ = transfer_generator(tensors, source, target, schedule.seed, dtype)

    critic_cfg = critic_config
    if critic_cfg is None and meta.get("critic"):
        critic_cfg = CriticConfig(**meta["critic"])
    if critic_cfg is None:
        raise ValueError("fine-tuning needs a critic configuration")
    critic_cfg = replace(critic_cfg, in_channels=target.channels)
    critic = build_critic(critic_cfg, seed=schedule.seed + 1, dtype=dtype)
    saved = split_prefix(tensors, "critic.")
    if saved and meta.get("critic") and CriticConfig(**meta["critic"]) == critic_cfg:
        critic.load_state_dict({k: v.to(dtype) for k, v in saved.items()})

    state = TrainState(gen, _adam(gen.parameters(), schedule), schedule, critic,
                       _adam(critic.parameters(), schedule), step=int(meta.get("step", 0)))
    if log_dir is not None:
        attach_logs(state, log_dir)
    return adversarial_train(state, data, variant, weights, V, steps, gp_weight,
                             loss_hook=loss_hook, on_step=on_step, phase="finetune")
