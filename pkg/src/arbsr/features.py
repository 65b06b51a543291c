"""Frozen feature networks for the perceptual loss and for FID embeddings.

Two families are provided. Production tags wrap torchvision architectures and
load weights from a local tensor archive. The ``seeded-small-conv`` tag is a
small random conv stack, frozen and fully determined by its seed, used when
no pretrained weights are available.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DESK_TAG = "seeded-small-conv"
VGG_TAG = "vgg19"
INCEPTION_TAG = "inception-v3-pool3"
IDENTITY_TAG = "identity"
TAGS = (DESK_TAG, VGG_TAG, INCEPTION_TAG, IDENTITY_TAG)


class TappedSequential(nn.Module):
    """Runs a Sequential up to a named layer and returns that layer's output."""

    def __init__(self, seq: nn.Sequential, names: dict[str, int]):
        super().__init__()
        self.seq = seq
        self.names = names

    def forward(self, x: torch.Tensor, layer: str) -> torch.Tensor:
        try:
            stop = self.names[layer]
        except KeyError:
            raise ValueError(f"unknown layer tag {layer!r}; available: {sorted(self.names)}")
        for i, mod in enumerate(self.seq):
            x = mod(x)
            if i == stop:
                return x
        return x


def desk_network(seed: int = 0, in_channels: int = 3) -> TappedSequential:
    specs = [(in_channels, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2)]
    layers, names = [], {}
    gen = torch.Generator().manual_seed(seed)
    for n, (cin, cout, stride) in enumerate(specs, start=1):
        conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        bound = (6.0 / (cin * 9)) ** 0.5
        with torch.no_grad():
            conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen).mul_(2 * bound).sub_(bound))
            conv.bias.copy_(torch.rand(conv.bias.shape, generator=gen).mul_(0.2).sub_(0.1))
        names[f"conv{n}"] = len(layers)
        layers.append(conv)
        names[f"relu{n}"] = len(layers)
        layers.append(nn.LeakyReLU(0.2))
    return TappedSequential(nn.Sequential(*layers), names)


def vgg19_network(weights_path=None) -> TappedSequential:
    from torchvision.models import vgg19
    feats = vgg19(weights=None).features
    if weights_path is not None:
        _load_into(feats, weights_path, strip_prefix="features.")
    names, block, conv = {}, 1, 0
    for i, mod in enumerate(feats):
        if isinstance(mod, nn.Conv2d):
            conv += 1
            names[f"conv{block}_{conv}"] = i
        elif isinstance(mod, nn.ReLU):
            names[f"relu{block}_{conv}"] = i
        elif isinstance(mod, nn.MaxPool2d):
            block, conv = block + 1, 0
    # in-place ReLUs would overwrite the pre-activation tap
    for mod in feats:
        if isinstance(mod, nn.ReLU):
            mod.inplace = False
    return TappedSequential(feats, names)


def _load_into(module: nn.Module, path, strip_prefix: str = "") -> None:
    path = Path(path)
    if path.suffix == ".safetensors":
        from safetensors.torch import load_file
        state = load_file(str(path))
    else:
        state = torch.load(path, map_location="cpu", weights_only=True)
    if strip_prefix:
        state = {k[len(strip_prefix):] if k.startswith(strip_prefix) else k: v for k, v in state.items()}
    own = module.state_dict()
    module.load_state_dict({k: v for k, v in state.items() if k in own}, strict=True)


class InceptionPool(nn.Module):
    """Inception-V3 up to the 2048-d global pool, inputs resized to 299x299."""

    def __init__(self, weights_path=None):
        super().__init__()
        from torchvision.models import inception_v3
        net = inception_v3(weights=None, aux_logits=False, init_weights=False)
        if weights_path is not None:
            _load_into(net, weights_path)
        net.fc = nn.Identity()
        self.net = net

    def forward(self, x: torch.Tensor, layer: str = "pool3") -> torch.Tensor:
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        return self.net(x)


class _Identity(nn.Module):
    def forward(self, x, layer=None):
        return x


@dataclass
class FeatureExtractorHandle:
    """A frozen network plus the layer tag to read, with input adaptation.

    Images arrive with values in [0, 1] and any channel count; each channel is
    fed separately, replicated to ``in_channels``.
    """
    tag: str
    network: nn.Module
    layer: str | None
    in_channels: int = 3
    imagenet_norm: bool = False
    _per_dtype: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.network.eval()
        for p in self.network.parameters():
            p.requires_grad_(False)

    def _net(self, dtype: torch.dtype) -> nn.Module:
        if dtype not in self._per_dtype:
            net = copy.deepcopy(self.network).to(dtype)
            for p in net.parameters():
                p.requires_grad_(False)
            self._per_dtype[dtype] = net.eval()
        return self._per_dtype[dtype]

    def prepare(self, single: torch.Tensor) -> torch.Tensor:
        """[B, 1, H, W] -> network input [B, in_channels, H, W]."""
        x = single.expand(-1, self.in_channels, -1, -1)
        if self.imagenet_norm:
            mean = x.new_tensor(IMAGENET_MEAN[: self.in_channels]).view(1, -1, 1, 1)
            std = x.new_tensor(IMAGENET_STD[: self.in_channels]).view(1, -1, 1, 1)
            x = (x - mean) / std
        return x

    def features(self, single: torch.Tensor, layer: str | None = None) -> torch.Tensor:
        if single.dim() != 4 or single.shape[1] != 1:
            raise ValueError(f"expected a [B, 1, H, W] tensor, got {tuple(single.shape)}")
        net = self._net(single.dtype)
        return net(self.prepare(single), layer or self.layer)

    def __call__(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Per-channel feature maps of a [B, m, H, W] batch."""
        return [self.features(images[:, c:c + 1]) for c in range(images.shape[1])]


def build_extractor(tag: str = DESK_TAG, layer: str | None = None, weights_path=None,
                    seed: int = 0) -> FeatureExtractorHandle:
    if tag == DESK_TAG:
        return FeatureExtractorHandle(tag, desk_network(seed), layer or "conv3", 3)
    if tag == VGG_TAG:
        if weights_path is None:
            raise ValueError("vgg19 extractor needs a weights archive")
        return FeatureExtractorHandle(tag, vgg19_network(weights_path), layer or "conv5_4", 3, imagenet_norm=True)
    if tag == INCEPTION_TAG:
        if weights_path is None:
            raise ValueError("inception extractor needs a weights archive")
        return FeatureExtractorHandle(tag, InceptionPool(weights_path), "pool3", 3, imagenet_norm=True)
    if tag == IDENTITY_TAG:
        return FeatureExtractorHandle(tag, _Identity(), None, 1)
    raise ValueError(f"unknown feature extractor tag {tag!r}; expected one of {TAGS}")


def build_embedder(tag: str = DESK_TAG, weights_path=None, seed: int = 0) -> "Embedder":
    if tag == DESK_TAG:
        return Embedder(build_extractor(DESK_TAG, "relu4", seed=seed))
    if tag == INCEPTION_TAG:
        return Embedder(build_extractor(INCEPTION_TAG, weights_path=weights_path))
    raise ValueError(f"unknown embedding tag {tag!r}")


class Embedder:
    """Image -> fixed-length vector: spatially pooled features, channels averaged."""

    def __init__(self, handle: FeatureExtractorHandle):
        self.handle = handle

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        feats = self.handle(images)
        vecs = [f.mean(dim=(2, 3)) if f.dim() == 4 else f for f in feats]
        return torch.stack(vecs).mean(0)
