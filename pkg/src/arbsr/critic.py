"""Discriminator / critic network shared by every adversarial loss variant."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

HEAD_MODES = ("classifier", "critic")


@dataclass(frozen=True)
class CriticConfig:
    n_blocks: int = 7
    base_channels: int = 64
    negative_slope: float = 0.2
    head_mode: str = "critic"
    in_channels: int = 1

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError(f"critic needs at least one block, got {self.n_blocks}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")

    def block_channels(self) -> list[int]:
        return [self.base_channels * 2 ** (i // 2) for i in range(self.n_blocks)]

    def min_input_size(self) -> int:
        """Smallest side for which every stride-2 layer still halves (input > 2^(n-1))."""
        return 2 ** (self.n_blocks - 1) + 1

    def to_dict(self) -> dict:
        return asdict(self)


def spatial_trace(size: int, n_blocks: int) -> list[int]:
    """Side length after each stride-2 (k=3, pad=1) layer: ceil halving."""
    trace = [size]
    for _ in range(n_blocks):
        trace.append(-(-trace[-1] // 2))
    return trace


class Critic(nn.Module):
    def __init__(self, config: CriticConfig):
        super().__init__()
        self.config = config
        layers = []
        cin = config.in_channels
        for cout in config.block_channels():
            layers.append(nn.Conv2d(cin, cout, 3, stride=1, padding=1))
            layers.append(nn.LeakyReLU(config.negative_slope))
            layers.append(nn.Conv2d(cout, cout, 3, stride=2, padding=1))
            layers.append(nn.LeakyReLU(config.negative_slope))
            cin = cout
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, 1)

    def check_input(self, x: torch.Tensor) -> None:
        h, w = x.shape[-2:]
        need = self.config.min_input_size()
        if min(h, w) < need:
            raise ValueError(
                f"critic with {self.config.n_blocks} down-sample blocks collapses a {h}x{w} input "
                f"(trace {spatial_trace(min(h, w), self.config.n_blocks)}); need sides >= {need}")

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Raw per-image scores, shape [B]."""
        self.check_input(x)
        f = self.features(x)
        return self.head(f.mean(dim=(2, 3))).squeeze(1)

    def forward(self, x: torch.Tensor, mode: str | None = None) -> torch.Tensor:
        mode = mode or self.config.head_mode
        z = self.logits(x)
        if mode == "classifier":
            return torch.sigmoid(z)
        if mode in ("critic", "logit"):
            return z
        raise ValueError(f"unknown critic mode {mode!r}")


def build_critic(config: CriticConfig, seed: int = 1, scheme: str = "kaiming-uniform",
                 dtype: torch.dtype = torch.float32) -> Critic:
    from .init import init_weights
    model = Critic(config).to(dtype)
    init_weights(model, scheme, seed)
    return model


def critic_forward(images: torch.Tensor, critic: Critic, mode: str | None = None) -> torch.Tensor:
    return critic(images, mode)


def input_gradient(critic, images: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """d critic(I) / d I for every image of the batch (samples are independent)."""
    x = images if images.requires_grad else images.detach().requires_grad_(True)
    with torch.enable_grad():
        scores = critic(x)
        if not scores.requires_grad:
            return torch.zeros_like(x)
        (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=create_graph, allow_unused=True)
    return torch.zeros_like(x) if grad is None else grad


def critic_gradient_norm(images: torch.Tensor, critic, create_graph: bool = False) -> torch.Tensor:
    """Per-image L2 norm of the critic's input gradient, shape [B]."""
    grad = input_gradient(critic, images, create_graph)
    return grad.flatten(1).norm(2, dim=1)

