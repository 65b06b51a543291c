"""Parameter initialisation schemes."""
from __future__ import annotations

import warnings

import torch
import torch.nn as nn

SCHEMES = ("kaiming-uniform", "kaiming-normal")
NEGATIVE_SLOPE = 0.2


class InitWarning(UserWarning):
    pass


def kaiming_uniform_bound(fan_in: int, negative_slope: float = NEGATIVE_SLOPE) -> float:
    gain = (2.0 / (1.0 + negative_slope ** 2)) ** 0.5
    return gain * (3.0 / fan_in) ** 0.5


@torch.no_grad()
def init_weights(module: nn.Module, scheme: str = "kaiming-uniform", seed: int = 0) -> nn.Module:
    """Re-initialise every conv/linear weight (fan-in, leaky-ReLU gain) and zero biases.

    Parameters are visited in ``named_modules`` order from one seeded generator,
    so the same (architecture, scheme, seed) always yields the same weights.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {SCHEMES}")
    if scheme == "kaiming-normal":
        warnings.warn("kaiming-normal initialisation is known to destabilise training of this "
                      "model from scratch; prefer kaiming-uniform", InitWarning, stacklevel=2)
    gen = torch.Generator().manual_seed(seed)
    for _, mod in module.named_modules():
        if isinstance(mod, (nn.Conv2d, nn.Linear)):
            init_layer(mod, scheme, gen)
    return module


@torch.no_grad()
def init_layer(mod: nn.Module, scheme: str, gen: torch.Generator) -> None:
    w = mod.weight
    fan_in = w[0].numel()
    if scheme == "kaiming-uniform":
        bound = kaiming_uniform_bound(fan_in)
        w.copy_(torch.rand(w.shape, generator=gen, dtype=torch.float64).mul_(2 * bound).sub_(bound))
    else:
        std = kaiming_uniform_bound(fan_in) / 3.0 ** 0.5
        w.copy_(torch.randn(w.shape, generator=gen, dtype=torch.float64).mul_(std))
    if mod.bias is not None:
        mod.bias.zero_()
