"""Declarative run configuration: YAML with sections, strict keys, presets, sweeps.

Every key lives under one of the sections ``model``, ``critic``, ``data``,
``loss``, ``schedule`` and ``eval``. Unknown keys and out-of-range values are
rejected with the dotted key path in the message.
"""
from __future__ import annotations

import copy
import itertools
import math
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .critic import CriticConfig
from .features import DESK_TAG, INCEPTION_TAG, TAGS, VGG_TAG
from .generator import GeneratorConfig
from .init import SCHEMES
from .losses import VARIANTS, LossWeights
from .training import TrainSchedule, check_scale_grid, default_scale_grid

METRICS = ("psnr", "ssim", "fid")
PRECISIONS = ("float32", "float64")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ModelSection:
    depth: int = 16
    width: int = 64
    kernel_size: int = 3
    res_scale: float = 1.0
    channels: int = 1
    meta_hidden: int = 256
    init: str = "kaiming-uniform"
    precision: str = "float32"

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(self.depth, self.width, self.kernel_size, self.res_scale,
                               self.channels, self.meta_hidden)


@dataclass(frozen=True)
class CriticSection:
    n_blocks: int = 7
    base_channels: int = 64
    negative_slope: float = 0.2

    def critic_config(self, in_channels: int = 1) -> CriticConfig:
        return CriticConfig(self.n_blocks, self.base_channels, self.negative_slope, "critic", in_channels)


@dataclass(frozen=True)
class DataSection:
    profile: str = "oasis"
    paths: tuple[str, ...] = ()
    test_paths: tuple[str, ...] = ()
    patch_size: int = 96
    seed: int = 0
    # synthetic corpus, used when no paths are given
    phantom_train: int = 8
    phantom_test: int = 2
    phantom_slices: int = 8
    # > 0 trains on this many fixed patches instead of random crops
    fixed_patches: int = 0


@dataclass(frozen=True)
class LossSection:
    lam: float = 1.0
    gamma: float = 0.001
    eta: float = 0.006
    variant: str = "wgangp"
    gp_weight: float = 10.0
    clip_value: float | None = None
    perceptual: str = VGG_TAG
    perceptual_layer: str | None = None
    perceptual_weights: str | None = None

    def weights(self) -> LossWeights:
        return LossWeights(self.lam, self.gamma, self.eta)


@dataclass(frozen=True)
class EvalSection:
    scale_grid: tuple[float, ...] = field(default_factory=default_scale_grid)
    metrics: tuple[str, ...] = METRICS
    embedding: str = INCEPTION_TAG
    embedding_weights: str | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    critic: CriticSection = field(default_factory=CriticSection)
    data: DataSection = field(default_factory=DataSection)
    loss: LossSection = field(default_factory=LossSection)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name), name) for name in SECTIONS}

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        return build_config(raw or {})


SECTIONS = {"model": ModelSection, "critic": CriticSection, "data": DataSection,
            "loss": LossSection, "schedule": TrainSchedule, "eval": EvalSection}
# file key -> dataclass field
ALIASES = {"loss": {"lambda": "lam"}}


def _alias_of(section: str, fname: str) -> str:
    for k, v in ALIASES.get(section, {}).items():
        if v == fname:
            return k
    return fname


def _section_dict(obj, section: str) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[_alias_of(section, f.name)] = list(v) if isinstance(v, tuple) else v
    return out


# -- coercion ---------------------------------------------------------------

def _as_float(v, key: str) -> float:
    if isinstance(v, bool):
        raise ConfigError(key, f"expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        text = v.strip().lower()
        if text in ("inf", "+inf", ".inf", "infinity"):
            return math.inf
        try:
            return float(text)
        except ValueError:
            pass
    raise ConfigError(key, f"expected a number, got {v!r}")


def _as_int(v, key: str) -> int:
    if isinstance(v, bool):
        raise ConfigError(key, f"expected an integer, got {v!r}")
    if isinstance(v, int):
        return v
    x = _as_float(v, key)
    if not math.isfinite(x) or x != int(x):
        raise ConfigError(key, f"expected an integer, got {v!r}")
    return int(x)


def _coerce(v, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if v is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(v, inner[0], key)
    if origin is tuple:
        if not isinstance(v, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {v!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(x, args[0], f"{key}[{i}]") for i, x in enumerate(v))
        if len(v) != len(args):
            raise ConfigError(key, f"expected {len(args)} values, got {len(v)}")
        return tuple(_coerce(x, a, f"{key}[{i}]") for i, (x, a) in enumerate(zip(v, args)))
    if tp is bool:
        if not isinstance(v, bool):
            raise ConfigError(key, f"expected true/false, got {v!r}")
        return v
    if tp is int:
        return _as_int(v, key)
    if tp is float:
        return _as_float(v, key)
    if tp is str:
        if not isinstance(v, str):
            raise ConfigError(key, f"expected a string, got {v!r}")
        return v
    raise TypeError(f"unsupported config type {tp} at {key}")


# -- validation -------------------------------------------------------------

def _nonneg(x):
    return not math.isnan(x) and x >= 0


RULES: dict[str, tuple[typing.Callable, str]] = {
    "model.depth": (lambda x: x >= 1, "must be >= 1"),
    "model.width": (lambda x: x >= 1, "must be >= 1"),
    "model.kernel_size": (lambda x: x >= 1 and x % 2 == 1, "must be a positive odd integer"),
    "model.res_scale": (lambda x: math.isfinite(x) and x > 0, "must be > 0"),
    "model.channels": (lambda x: x in (1, 4), "must be 1 or 4"),
    "model.meta_hidden": (lambda x: x >= 1, "must be >= 1"),
    "model.init": (lambda x: x in SCHEMES, f"must be one of {list(SCHEMES)}"),
    "model.precision": (lambda x: x in PRECISIONS, f"must be one of {list(PRECISIONS)}"),
    "critic.n_blocks": (lambda x: x >= 1, "must be >= 1"),
    "critic.base_channels": (lambda x: x >= 1, "must be >= 1"),
    "critic.negative_slope": (lambda x: 0 <= x < 1, "must be in [0, 1)"),
    "data.patch_size": (lambda x: x >= 8, "must be >= 8"),
    "data.phantom_train": (lambda x: x >= 1, "must be >= 1"),
    "data.phantom_test": (lambda x: x >= 1, "must be >= 1"),
    "data.phantom_slices": (lambda x: x >= 1, "must be >= 1"),
    "data.fixed_patches": (lambda x: x >= 0, "must be >= 0"),
    "loss.lambda": (_nonneg, "must be >= 0"),
    "loss.gamma": (_nonneg, "must be >= 0"),
    "loss.eta": (_nonneg, "must be >= 0"),
    "loss.variant": (lambda x: x in VARIANTS, f"must be one of {list(VARIANTS)}"),
    "loss.gp_weight": (lambda x: math.isfinite(x) and x >= 0, "must be a finite value >= 0"),
    "loss.clip_value": (lambda x: x is None or x > 0, "must be > 0 or null"),
    "loss.perceptual": (lambda x: x in TAGS, f"must be one of {list(TAGS)}"),
    "eval.metrics": (lambda x: len(x) > 0 and set(x) <= set(METRICS), f"must be a non-empty subset of {list(METRICS)}"),
    "eval.embedding": (lambda x: x in (DESK_TAG, INCEPTION_TAG), f"must be {DESK_TAG!r} or {INCEPTION_TAG!r}"),
    "schedule.warmup_steps": (lambda x: x >= 0, "must be >= 0"),
    "schedule.adv_steps": (lambda x: x >= 0, "must be >= 0"),
    "schedule.finetune_steps": (lambda x: x >= 0, "must be >= 0"),
    "schedule.checkpoint_every": (lambda x: x >= 0, "must be >= 0"),
    "schedule.batch_size": (lambda x: x >= 1, "must be >= 1"),
    "schedule.lr0": (lambda x: math.isfinite(x) and x > 0, "must be > 0"),
    "schedule.lr_halving_period": (lambda x: x >= 1, "must be >= 1"),
    "schedule.adam_betas": (lambda x: all(0 <= b < 1 for b in x), "entries must lie in [0, 1)"),
    "schedule.loss_guard": (lambda x: x >= 0, "must be >= 0"),
    "schedule.n_critic": (lambda x: x >= 1, "must be >= 1"),
}


def _build_section(name: str, raw) -> object:
    cls = SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(name, f"expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    aliases = ALIASES.get(name, {})
    known = {_alias_of(name, f.name): f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        path = f"{name}.{key}"
        if key not in known:
            raise ConfigError(path, f"unknown key (allowed: {', '.join(known)})")
        fname = aliases.get(key, key)
        v = _coerce(value, hints[fname], path)
        rule = RULES.get(path)
        if rule is not None and not rule[0](v):
            raise ConfigError(path, f"{rule[1]}, got {value!r}")
        if path in ("schedule.scale_grid", "eval.scale_grid"):
            try:
                v = check_scale_grid(v, path)
            except ValueError as exc:
                raise ConfigError(path, str(exc).split(": ", 1)[-1]) from None
        kwargs[fname] = v
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(name, str(exc)) from None


def build_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping of sections")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(str(key), f"unknown section (allowed: {', '.join(SECTIONS)})")
    cfg = RunConfig(**{name: _build_section(name, raw.get(name)) for name in SECTIONS})
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: RunConfig) -> None:
    try:
        cfg.loss.weights()
    except ValueError as exc:
        raise ConfigError("loss", str(exc)) from None


# -- presets, files, sweeps -------------------------------------------------

PRESETS: dict[str, dict] = {
    "default": {},
    "tiny": {
        "model": {"depth": 4, "width": 16, "meta_hidden": 64},
        "critic": {"n_blocks": 4, "base_channels": 16},
        "data": {"profile": "phantom64x64", "patch_size": 32, "phantom_train": 4, "phantom_test": 2,
                 "phantom_slices": 8},
        "loss": {"perceptual": DESK_TAG},
        "schedule": {"warmup_steps": 200, "adv_steps": 200, "finetune_steps": 100, "batch_size": 4,
                     "lr0": 3e-3, "lr_halving_period": 700, "checkpoint_every": 100},
        "eval": {"scale_grid": [1.5, 2.0, 2.5, 3.0, 3.5, 4.0], "embedding": DESK_TAG},
    },
}


def load_raw(source) -> dict:
    """A preset name, a YAML path, or an already-parsed mapping."""
    if isinstance(source, dict):
        return copy.deepcopy(source)
    text_source = str(source)
    path = Path(text_source)
    if not path.exists() and text_source in PRESETS:
        return copy.deepcopy(PRESETS[text_source])
    if not path.exists():
        raise ConfigError("<file>", f"no config file or preset named {text_source!r} "
                                    f"(presets: {', '.join(PRESETS)})")
    raw = yaml.safe_load(path.read_text())
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping of sections")
    return raw


def parse_config(source, overrides: list[str] | None = None) -> RunConfig:
    raw = load_raw(source)
    for item in overrides or ():
        set_dotted(raw, *parse_override(item))
    return build_config(raw)


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(item, "override must look like section.key=value")
    key, text = item.split("=", 1)
    return key.strip(), yaml.safe_load(text)


def set_dotted(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    if len(parts) != 2:
        raise ConfigError(key, "expected a section.key path")
    section, name = parts
    if section not in SECTIONS:
        raise ConfigError(key, f"unknown section (allowed: {', '.join(SECTIONS)})")
    sec = raw.setdefault(section, {})
    if sec is None:
        sec = raw[section] = {}
    sec[name] = value


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(cfg.dump())
    return path


@dataclass(frozen=True)
class SweepPoint:
    label: str
    assignments: dict
    config: RunConfig


def parse_sweep(source) -> list[SweepPoint]:
    """Expand a sweep file into one validated config per grid point.

    The file holds ``base`` (preset name, path or inline mapping), ``sweep``
    (dotted key -> list of values) and optionally ``mode`` (``product`` or ``zip``).
    """
    raw = load_raw(source)
    unknown = set(raw) - {"base", "sweep", "mode"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown sweep key (allowed: base, sweep, mode)")
    base = raw.get("base", {})
    if isinstance(base, str) and isinstance(source, (str, Path)) and not Path(base).is_absolute():
        candidate = Path(source).parent / base
        base = str(candidate) if candidate.exists() else base
    base_raw = load_raw(base)
    axes = raw.get("sweep") or {}
    if not isinstance(axes, dict) or not axes:
        raise ConfigError("sweep", "expected a non-empty mapping of dotted keys to value lists")
    for key, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{key}", "expected a non-empty list of values")
    mode = raw.get("mode", "product")
    keys = list(axes)
    if mode == "product":
        combos = list(itertools.product(*(axes[k] for k in keys)))
    elif mode == "zip":
        lengths = {len(axes[k]) for k in keys}
        if len(lengths) != 1:
            raise ConfigError("sweep", "zip mode needs equally long value lists")
        combos = list(zip(*(axes[k] for k in keys)))
    else:
        raise ConfigError("mode", f"must be 'product' or 'zip', got {mode!r}")
    points = []
    for combo in combos:
        point_raw = copy.deepcopy(base_raw)
        assignment = dict(zip(keys, combo))
        for k, v in assignment.items():
            set_dotted(point_raw, k, v)
        label = ",".join(f"{k}={v}" for k, v in assignment.items())
        points.append(SweepPoint(label, assignment, build_config(point_raw)))
    return points


def with_schedule(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, schedule=replace(cfg.schedule, **changes))
