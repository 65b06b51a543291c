"""Blur and cubic-convolution resampling on numpy images.

Images are float arrays whose last two axes are (H, W); any leading axes
(channels, slices) are resampled independently.
"""
from __future__ import annotations

import math

import numpy as np

CUBIC_A = -0.5
BLUR_SIGMA = 0.5
# absorbs binary-float noise in products like 3.3 * 20 before flooring
FLOOR_EPS = 1e-9


def floor_dim(x: float) -> int:
    return int(math.floor(x + FLOOR_EPS))


def cubic_kernel(x, a: float = CUBIC_A):
    """Keys cubic convolution kernel, support [-2, 2]."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2 = x * x
    x3 = x2 * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def _axis_weights(n_in: int, n_out: int, scale: float) -> np.ndarray:
    """Dense [n_out, n_in] interpolation matrix for one axis.

    Output sample ``o`` sits at source coordinate ``(o + 0.5) / scale - 0.5``
    (pixel-centre alignment); taps outside the image clamp to the edge pixel.
    """
    out = np.arange(n_out, dtype=np.float64)
    src = (out + 0.5) / scale - 0.5
    base = np.floor(src).astype(np.int64)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for tap in range(-1, 3):
        idx = base + tap
        w = cubic_kernel(src - idx)
        np.add.at(mat, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return mat


def bicubic_resize(img, factor: float, out_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Resize the trailing (H, W) axes by ``factor`` with cubic convolution (a=-0.5).

    Output dims default to ``(floor(H*factor), floor(W*factor))``; ``out_shape``
    overrides them while keeping ``factor`` as the coordinate mapping. No
    anti-aliasing is applied on downscale.
    """
    img = np.asarray(img, dtype=np.float64)
    if factor <= 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    h, w = img.shape[-2:]
    if out_shape is None:
        out_shape = (floor_dim(h * factor), floor_dim(w * factor))
    oh, ow = out_shape
    if oh <= 0 or ow <= 0:
        raise ValueError(f"resize of {h}x{w} by {factor} gives empty output {oh}x{ow}")
    if (oh, ow) == (h, w) and factor == 1.0:
        return img.copy()
    wy = _axis_weights(h, oh, factor)
    wx = _axis_weights(w, ow, factor)
    return np.einsum("oh,...hw,pw->...op", wy, img, wx)


def gaussian_kernel3(sigma: float = BLUR_SIGMA) -> np.ndarray:
    t = np.exp(-np.arange(-1, 2, dtype=np.float64) ** 2 / (2.0 * sigma * sigma))
    t /= t.sum()
    return np.outer(t, t)


def gaussian_blur_3x3(img, sigma: float = BLUR_SIGMA) -> np.ndarray:
    """Separable 3x3 Gaussian blur with mirror ('reflect', edge not repeated) padding."""
    img = np.asarray(img, dtype=np.float64)
    t = np.exp(-np.arange(-1, 2, dtype=np.float64) ** 2 / (2.0 * sigma * sigma))
    t /= t.sum()
    pad = [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(img, pad, mode="reflect")
    rows = t[0] * p[..., :-2, :] + t[1] * p[..., 1:-1, :] + t[2] * p[..., 2:, :]
    return t[0] * rows[..., :, :-2] + t[1] * rows[..., :, 1:-1] + t[2] * rows[..., :, 2:]
