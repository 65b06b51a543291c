"""EDSR-lite feature extractor and meta-upscale module.

The upscaler predicts one k x k x w -> m kernel per output pixel from that
pixel's fractional source offset and 1/s, then applies it to the k x k LR
feature neighbourhood around the projected source pixel. ``meta_upscale_dense``
builds the equivalent full [H_out*W_out, H_lr*W_lr] magnification matrix and is
kept as a small-input reference for the local path.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import check_scale
from .resample import FLOOR_EPS, floor_dim

NEGATIVE_SLOPE = 0.2
DENSE_ELEMENT_CAP = 50_000_000


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 16
    width: int = 64
    kernel_size: int = 3
    res_scale: float = 1.0
    channels: int = 1
    meta_hidden: int = 256

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.res_scale < 0:
            raise ValueError(f"res_scale must be >= 0, got {self.res_scale}")
        if self.channels not in (1, 4):
            raise ValueError(f"channels must be 1 or 4, got {self.channels}")
        if self.meta_hidden < 1:
            raise ValueError(f"meta_hidden must be >= 1, got {self.meta_hidden}")

    def to_dict(self) -> dict:
        return asdict(self)


def count_params(config: GeneratorConfig) -> int:
    m, w, k, h = config.channels, config.width, config.kernel_size, config.meta_hidden
    conv = lambda cin, cout: cin * cout * k * k + cout  # noqa: E731
    head = conv(m, w)
    body = config.depth * 2 * conv(w, w)
    tail = conv(w, w)
    meta = (3 * h + h) + (h * m * w * k * k + m * w * k * k)
    return head + body + tail + meta


def erb_forward(x: torch.Tensor, params: dict, res_scale: float,
                negative_slope: float = NEGATIVE_SLOPE) -> torch.Tensor:
    """x + res_scale * conv2(leaky_relu(conv1(x))); same padding throughout."""
    w1 = params["conv1.weight"]
    if x.shape[1] != w1.shape[1]:
        raise ValueError(f"ERB expects {w1.shape[1]} channels, got {x.shape[1]}")
    pad = w1.shape[-1] // 2
    y = F.conv2d(x, w1, params.get("conv1.bias"), padding=pad)
    y = F.leaky_relu(y, negative_slope)
    y = F.conv2d(y, params["conv2.weight"], params.get("conv2.bias"), padding=pad)
    return x + res_scale * y


class ERB(nn.Module):
    def __init__(self, width: int, kernel_size: int, res_scale: float):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv2d(width, width, kernel_size, padding=kernel_size // 2)
        self.res_scale = res_scale

    def forward(self, x):
        params = {
            "conv1.weight": self.conv1.weight, "conv1.bias": self.conv1.bias,
            "conv2.weight": self.conv2.weight, "conv2.bias": self.conv2.bias,
        }
        return erb_forward(x, params, self.res_scale)


class WeightPredictor(nn.Sequential):
    """(row offset, col offset, 1/s) -> flattened [m, w, k, k] kernel.

    The raw output is divided by sqrt(w k^2), the fan-in of the predicted
    kernel, so initial upscaled outputs have unit-order variance.
    """

    def __init__(self, width: int, out_channels: int, kernel_size: int, hidden: int):
        super().__init__(
            nn.Linear(3, hidden),
            nn.ReLU(),
            nn.Linear(hidden, out_channels * width * kernel_size * kernel_size),
        )
        self.width = width
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.fan_in_scale = 1.0 / math.sqrt(width * kernel_size * kernel_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x) * self.fan_in_scale


@dataclass
class MetaWeights:
    """Per-output-pixel kernels, factored by unique row/column offsets.

    Pixel (i, j) uses ``unique_kernels[row_index[i], col_index[j]]`` applied at
    LR source pixel ``(src_rows[i], src_cols[j])``.
    """
    scale: float
    unique_kernels: torch.Tensor  # [U_r, U_c, m, w, k, k]
    row_index: np.ndarray
    col_index: np.ndarray
    src_rows: np.ndarray
    src_cols: np.ndarray
    row_offsets: np.ndarray
    col_offsets: np.ndarray

    @property
    def out_dims(self) -> tuple[int, int]:
        return len(self.src_rows), len(self.src_cols)

    @property
    def n_kernels(self) -> int:
        return len(self.src_rows) * len(self.src_cols)

    def meta_input(self, i: int, j: int) -> tuple[float, float, float]:
        return float(self.row_offsets[i]), float(self.col_offsets[j]), 1.0 / self.scale

    def kernel(self, i: int, j: int) -> torch.Tensor:
        return self.unique_kernels[self.row_index[i], self.col_index[j]]

    def source(self, i: int, j: int) -> tuple[int, int]:
        return int(self.src_rows[i]), int(self.src_cols[j])

    def full_kernels(self) -> torch.Tensor:
        """[H_out, W_out, m, w, k, k]; materialises every pixel's kernel."""
        return self.unique_kernels[self.row_index][:, self.col_index]


def _axis_geometry(n_out: int, n_lr: int | None, s: float):
    pos = np.arange(n_out, dtype=np.float64) / s
    src = np.floor(pos + FLOOR_EPS)
    offsets = np.clip(pos - src, 0.0, None)
    src = src.astype(np.int64)
    if n_lr is not None:
        src = np.clip(src, 0, n_lr - 1)
    return src, offsets


def predict_weights(s: float, out_dims: tuple[int, int], meta_net: WeightPredictor,
                    lr_dims: tuple[int, int] | None = None) -> MetaWeights:
    s = check_scale(s)
    h_out, w_out = out_dims
    if lr_dims is not None:
        expected = (floor_dim(s * lr_dims[0]), floor_dim(s * lr_dims[1]))
        if tuple(out_dims) != expected:
            raise ValueError(f"output dims {tuple(out_dims)} inconsistent with floor(s * {tuple(lr_dims)}) = {expected}")
    src_r, off_r = _axis_geometry(h_out, None if lr_dims is None else lr_dims[0], s)
    src_c, off_c = _axis_geometry(w_out, None if lr_dims is None else lr_dims[1], s)
    u_r, row_index = np.unique(off_r, return_inverse=True)
    u_c, col_index = np.unique(off_c, return_inverse=True)

    ref = meta_net[0].weight
    grid = torch.empty(len(u_r), len(u_c), 3, dtype=ref.dtype, device=ref.device)
    grid[..., 0] = torch.as_tensor(u_r, dtype=ref.dtype)[:, None]
    grid[..., 1] = torch.as_tensor(u_c, dtype=ref.dtype)[None, :]
    grid[..., 2] = 1.0 / s
    k = meta_net.kernel_size
    kernels = meta_net(grid).view(len(u_r), len(u_c), meta_net.out_channels, meta_net.width, k, k)
    return MetaWeights(s, kernels, row_index.reshape(-1), col_index.reshape(-1), src_r, src_c, off_r, off_c)


def upscaled_dims(lr_dims: tuple[int, int], s: float) -> tuple[int, int]:
    return floor_dim(s * lr_dims[0]), floor_dim(s * lr_dims[1])


def meta_upscale_local(feat: torch.Tensor, s: float, meta_net: WeightPredictor) -> torch.Tensor:
    """[B, w, H, W] features -> [B, m, floor(sH), floor(sW)] image."""
    b, c, h, w = feat.shape
    k = meta_net.kernel_size
    if c != meta_net.width:
        raise ValueError(f"features have {c} channels, weight predictor expects {meta_net.width}")
    out_dims = upscaled_dims((h, w), s)
    mw = predict_weights(s, out_dims, meta_net, lr_dims=(h, w))
    r = k // 2
    padded = F.pad(feat, (r, r, r, r), mode="reflect") if r else feat
    patches = F.unfold(padded, k).view(b, c * k * k, h, w)
    rows = torch.as_tensor(mw.src_rows, device=feat.device)
    cols = torch.as_tensor(mw.src_cols, device=feat.device)
    patches = patches.index_select(2, rows).index_select(3, cols)
    kern = mw.unique_kernels.flatten(3)
    kern = kern[torch.as_tensor(mw.row_index)][:, torch.as_tensor(mw.col_index)]
    return torch.einsum("bchw,hwoc->bohw", patches, kern)


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.where(idx < 0, -idx, idx)
    return np.where(idx >= n, 2 * (n - 1) - idx, idx)


def magnification_matrix(mw: MetaWeights, lr_dims: tuple[int, int],
                         max_elements: int = DENSE_ELEMENT_CAP) -> torch.Tensor:
    """Dense W_s of shape [H_out*W_out, H_lr*W_lr, m, w].

    Each pixel's k x k kernel is scattered onto the (reflected) LR support
    around its source pixel; reflected taps landing on the same LR pixel add.
    """
    h, w = lr_dims
    h_out, w_out = mw.out_dims
    kern = mw.full_kernels()
    m, c, k = kern.shape[2], kern.shape[3], kern.shape[4]
    n_out, n_in = h_out * w_out, h * w
    if n_out * n_in * m * c > max_elements:
        raise MemoryError(f"dense magnification matrix needs {n_out * n_in * m * c} elements, cap is {max_elements}")
    r = k // 2
    mat = kern.new_zeros(n_out, n_in, m, c)
    p = torch.arange(n_out)
    for dy in range(k):
        rows = _reflect(mw.src_rows + dy - r, h)
        for dx in range(k):
            cols = _reflect(mw.src_cols + dx - r, w)
            q = torch.as_tensor((rows[:, None] * w + cols[None, :]).reshape(-1))
            mat = mat.index_put((p, q), kern[:, :, :, :, dy, dx].reshape(n_out, m, c), accumulate=True)
    return mat


def meta_upscale_dense(feat: torch.Tensor, s: float, meta_net: WeightPredictor,
                       max_elements: int = DENSE_ELEMENT_CAP) -> torch.Tensor:
    """Reference upscale: F_sr = W_s x F_lr with the literal dense matrix."""
    b, c, h, w = feat.shape
    out_dims = upscaled_dims((h, w), s)
    mw = predict_weights(s, out_dims, meta_net, lr_dims=(h, w))
    mat = magnification_matrix(mw, (h, w), max_elements)
    out = torch.einsum("pqoc,bcq->bop", mat, feat.flatten(2))
    return out.view(b, mat.shape[2], *out_dims)


class Generator(nn.Module):
    """head conv -> d ERBs -> tail conv (+ head skip) -> meta-upscale."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        w, k = config.width, config.kernel_size
        self.head = nn.Conv2d(config.channels, w, k, padding=k // 2)
        self.body = nn.ModuleList(ERB(w, k, config.res_scale) for _ in range(config.depth))
        self.tail = nn.Conv2d(w, w, k, padding=k // 2)
        self.meta_net = WeightPredictor(w, config.channels, k, config.meta_hidden)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.config.channels:
            raise ValueError(f"generator expects {self.config.channels} channels, got {x.shape[1]}")
        head = self.head(x)
        y = head
        for block in self.body:
            y = block(y)
        return self.tail(y) + head

    def forward(self, x: torch.Tensor, s: float) -> torch.Tensor:
        return meta_upscale_local(self.features(x), s, self.meta_net)


def extract_features(lr: torch.Tensor, model: Generator) -> torch.Tensor:
    return model.features(lr)


def _as_batch(lr, ref: torch.Tensor) -> tuple[torch.Tensor, int]:
    t = torch.as_tensor(np.asarray(lr) if not torch.is_tensor(lr) else lr)
    t = t.to(dtype=ref.dtype, device=ref.device)
    ndim = t.dim()
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t, ndim


def generate(lr, s: float, model: Generator, clamp: bool = True) -> torch.Tensor:
    """Super-resolve ``lr`` ([H, W], [m, H, W] or [B, m, H, W]) at scale s.

    ``clamp`` maps the output into [0, 1]; leave it off inside a loss graph.
    """
    s = check_scale(s)
    x, ndim = _as_batch(lr, model.head.weight)
    out = model(x, s)
    if clamp:
        out = out.clamp(0.0, 1.0)
    while out.dim() > max(ndim, 2):
        out = out.squeeze(0)
    return out


def build_generator(config: GeneratorConfig, seed: int = 0, scheme: str = "kaiming-uniform",
                    dtype: torch.dtype = torch.float32) -> Generator:
    from .init import init_weights
    model = Generator(config).to(dtype)
    init_weights(model, scheme, seed)
    return model


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)

