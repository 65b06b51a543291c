"""Training objectives: L1, perceptual, four adversarial variants, weighted sum.

Adversarial functions take ``D`` as any callable mapping an image batch to one
score per image. What the score means depends on the variant:

* ``vanilla``: a probability in (0, 1) (classifier head with sigmoid)
* ``wgan`` / ``wgangp``: an unbounded critic value
* ``ragan``: a pre-sigmoid logit
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .critic import critic_gradient_norm

LOG_EPS = 1e-12
VARIANTS = ("vanilla", "wgan", "wgangp", "ragan")
CRITIC_MODE = {"vanilla": "classifier", "wgan": "critic", "wgangp": "critic", "ragan": "logit"}


@dataclass(frozen=True)
class LossWeights:
    """lam * L1 + gamma * L_adv + eta * L_perc.

    A single infinite weight selects that term alone (weight 1, others 0).
    """
    lam: float = 1.0
    gamma: float = 0.001
    eta: float = 0.006

    def __post_init__(self):
        for name, v in (("lambda", self.lam), ("gamma", self.gamma), ("eta", self.eta)):
            if math.isnan(v) or v < 0:
                raise ValueError(f"loss.{name} must be >= 0, got {v}")
        if sum(math.isinf(v) for v in (self.lam, self.gamma, self.eta)) > 1:
            raise ValueError("at most one loss weight may be infinite")

    def effective(self) -> tuple[float, float, float]:
        w = (self.lam, self.gamma, self.eta)
        if any(math.isinf(v) for v in w):
            return tuple(1.0 if math.isinf(v) else 0.0 for v in w)
        return w

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(sr: torch.Tensor, hr: torch.Tensor) -> None:
    if sr.shape != hr.shape:
        raise ValueError(f"SR and HR shapes differ: {tuple(sr.shape)} vs {tuple(hr.shape)}")


def l1_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    _check_pair(sr, hr)
    return (hr - sr).abs().mean()


def perceptual_loss(sr: torch.Tensor, hr: torch.Tensor, extractor) -> torch.Tensor:
    """Feature-space MSE, computed per image channel and averaged over channels."""
    _check_pair(sr, hr)
    terms = []
    for c in range(sr.shape[1]):
        with torch.no_grad():
            f_hr = extractor.features(hr[:, c:c + 1])
        f_sr = extractor.features(sr[:, c:c + 1])
        terms.append(F.mse_loss(f_sr, f_hr))
    return torch.stack(terms).mean()


# -- adversarial ------------------------------------------------------------

def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(LOG_EPS))


def vanilla_d(D, sr, hr):
    return -_log(D(hr)).mean() - _log(1.0 - D(sr)).mean()


def vanilla_g(D, sr, hr):
    return -_log(D(sr)).mean()


def adv_loss_vanilla(D, sr, hr):
    return vanilla_g(D, sr, hr), vanilla_d(D, sr, hr)


def wgan_d(D, sr, hr):
    return D(sr).mean() - D(hr).mean()


def wgan_g(D, sr, hr):
    return -D(sr).mean()


def adv_loss_wgan(D, sr, hr):
    return wgan_g(D, sr, hr), wgan_d(D, sr, hr)


@torch.no_grad()
def clip_weights(critic: torch.nn.Module, c: float) -> None:
    """Original WGAN weight clipping to [-c, c]; off unless configured."""
    for p in critic.parameters():
        p.clamp_(-c, c)


def interpolate(sr: torch.Tensor, hr: torch.Tensor, u: torch.Tensor | float | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """u * hr + (1 - u) * sr with one u ~ U[0, 1) per sample."""
    if u is None:
        u = torch.rand(sr.shape[0], generator=generator, dtype=sr.dtype)
    u = torch.as_tensor(u, dtype=sr.dtype)
    if u.dim() == 1:
        u = u.view(-1, *([1] * (sr.dim() - 1)))
    return u * hr + (1.0 - u) * sr


def gradient_penalty(D, sr, hr, u=None, generator=None) -> tuple[torch.Tensor, torch.Tensor]:
    """(mean (||grad D(x_hat)||_2 - 1)^2, per-sample norms)."""
    x_hat = interpolate(sr.detach(), hr.detach(), u, generator).requires_grad_(True)
    norms = critic_gradient_norm(x_hat, D, create_graph=True)
    return ((norms - 1.0) ** 2).mean(), norms.detach()


def wgangp_d(D, sr, hr, gp_weight: float = 10.0, u=None, generator=None):
    penalty, _ = gradient_penalty(D, sr, hr, u, generator)
    return wgan_d(D, sr, hr) + gp_weight * penalty


def adv_loss_wgangp(D, sr, hr, gp_weight: float = 10.0, u=None, generator=None):
    return wgan_g(D, sr, hr), wgangp_d(D, sr, hr, gp_weight, u, generator)


def _ragan_terms(D, sr, hr):
    if sr.shape[0] < 2:
        warnings.warn("relativistic average over a batch of one compares each sample with itself",
                      RuntimeWarning, stacklevel=3)
    c_real, c_fake = D(hr), D(sr)
    return c_real - c_fake.mean(), c_fake - c_real.mean()


def ragan_d(D, sr, hr):
    real_vs_fake, fake_vs_real = _ragan_terms(D, sr, hr)
    return -F.logsigmoid(real_vs_fake).mean() - F.logsigmoid(-fake_vs_real).mean()


def ragan_g(D, sr, hr):
    real_vs_fake, fake_vs_real = _ragan_terms(D, sr, hr)
    return -F.logsigmoid(fake_vs_real).mean() - F.logsigmoid(-real_vs_fake).mean()


def adv_loss_ragan(D, sr, hr):
    return ragan_g(D, sr, hr), ragan_d(D, sr, hr)


GENERATOR_TERMS = {"vanilla": vanilla_g, "wgan": wgan_g, "wgangp": wgan_g, "ragan": ragan_g}


def discriminator_loss(variant: str, D, sr, hr, gp_weight: float = 10.0, generator=None):
    """Critic-side objective with SR treated as a constant."""
    sr = sr.detach()
    if variant == "vanilla":
        return vanilla_d(D, sr, hr)
    if variant == "wgan":
        return wgan_d(D, sr, hr)
    if variant == "wgangp":
        return wgangp_d(D, sr, hr, gp_weight, generator=generator)
    if variant == "ragan":
        return ragan_d(D, sr, hr)
    raise ValueError(f"unknown adversarial variant {variant!r}; expected one of {VARIANTS}")


def generator_adv_loss(variant: str, D, sr, hr):
    try:
        fn = GENERATOR_TERMS[variant]
    except KeyError:
        raise ValueError(f"unknown adversarial variant {variant!r}; expected one of {VARIANTS}")
    return fn(D, sr, hr)


def scorer(critic, variant: str):
    """Bind a Critic module to the score semantics ``variant`` expects."""
    mode = CRITIC_MODE[variant]
    return lambda x: critic(x, mode)


def combined_loss(sr, hr, D, V, weights: LossWeights, variant: str = "wgangp"):
    """Weighted generator objective; returns (total, per-term values).

    Terms with zero effective weight are skipped entirely, so ``gamma = eta = 0``
    reduces to the plain L1 graph.
    """
    lam, gamma, eta = weights.effective()
    parts: dict[str, torch.Tensor] = {}
    total = None

    def add(name, w, fn):
        nonlocal total
        if w == 0:
            parts[name] = sr.new_zeros(())
            return
        value = fn()
        parts[name] = value.detach()
        total = w * value if total is None else total + w * value

    add("l1", lam, lambda: l1_loss(sr, hr))
    add("adv", gamma, lambda: generator_adv_loss(variant, D, sr, hr))
    add("perc", eta, lambda: perceptual_loss(sr, hr, V))
    if total is None:
        total = (sr * 0).sum()
    return total, parts
