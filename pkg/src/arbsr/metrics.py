"""PSNR, SSIM and Frechet distance on embedded image sets."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

SSIM_WIN = 11
SSIM_SIGMA = 1.5
PSD_TOL = 1e-8


def _as_np(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(sr, hr, L: float = 1.0) -> float:
    """10 log10(L^2 / MSE); returns +inf when the images are identical."""
    sr, hr = _as_np(sr), _as_np(hr)
    if sr.shape != hr.shape:
        raise ValueError(f"PSNR needs matching shapes, got {sr.shape} and {hr.shape}")
    mse = float(np.mean((sr - hr) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(L) - 10.0 * math.log10(mse)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-t * t / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    rows = sum(g[i] * img[..., i:img.shape[-2] - n + 1 + i, :] for i in range(n))
    return sum(g[i] * rows[..., :, i:rows.shape[-1] - n + 1 + i] for i in range(n))


def ssim_map(x: np.ndarray, y: np.ndarray, L: float = 1.0) -> np.ndarray:
    k1, k2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    g = gaussian_window()
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x * mu_x
    var_y = _filter_valid(y * y, g) - mu_y * mu_y
    cov = _filter_valid(x * y, g) - mu_x * mu_y
    lum = (2.0 * mu_x * mu_y + k1) / (mu_x * mu_x + mu_y * mu_y + k1)
    struct = (2.0 * cov + k2) / (var_x + var_y + k2)
    return lum * struct


def ssim(x, y, L: float = 1.0) -> float:
    """Mean SSIM over every 11x11 Gaussian window (sigma 1.5) fully inside the image.

    Leading axes (channels, batch) are evaluated separately and averaged.
    """
    x, y = _as_np(x), _as_np(y)
    if x.shape != y.shape:
        raise ValueError(f"SSIM needs matching shapes, got {x.shape} and {y.shape}")
    if min(x.shape[-2:]) < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape[-2:]}")
    m = ssim_map(x, y, L)
    return float(m.reshape(-1, *m.shape[-2:]).mean(axis=(-2, -1)).mean())


# -- Frechet distance -------------------------------------------------------

@dataclass
class EmbeddingStats:
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_vectors(cls, vecs) -> "EmbeddingStats":
        v = _as_np(vecs)
        if v.ndim != 2 or v.shape[0] < 2:
            raise ValueError(f"need at least two embedding vectors, got shape {v.shape}")
        if v.shape[0] <= v.shape[1]:
            warnings.warn(f"{v.shape[0]} samples for {v.shape[1]}-d embeddings: covariance is rank-deficient",
                          RuntimeWarning, stacklevel=2)
        return cls(v.mean(axis=0), np.cov(v, rowvar=False))


def _psd_sqrt(mat: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    """(eigenvalue square roots, symmetric matrix square root) with PSD check."""
    mat = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(mat)
    tol = PSD_TOL * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise ValueError(f"{what} is not positive semi-definite (min eigenvalue {vals.min():.3e})")
    roots = np.sqrt(np.clip(vals, 0.0, None))
    return roots, (vecs * roots) @ vecs.T


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace term uses Tr((S_a S_b)^(1/2)) = Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)),
    whose argument is symmetric PSD, so only symmetric eigendecompositions are needed.
    """
    mu_a, mu_b = np.atleast_1d(a.mu), np.atleast_1d(b.mu)
    s_a, s_b = np.atleast_2d(a.sigma), np.atleast_2d(b.sigma)
    if mu_a.shape != mu_b.shape or s_a.shape != s_b.shape:
        raise ValueError("embedding statistics have different dimensionality")
    _, root_a = _psd_sqrt(s_a, "first covariance")
    _psd_sqrt(s_b, "second covariance")
    cross_roots, _ = _psd_sqrt(root_a @ s_b @ root_a, "covariance product")
    diff = mu_a - mu_b
    d = float(diff @ diff + np.trace(s_a) + np.trace(s_b) - 2.0 * cross_roots.sum())
    return max(d, 0.0)


def embed(images, embedder) -> np.ndarray:
    """One vector per image. ``images``: [N, m, H, W] array or a list of [m, H, W] arrays."""
    ref_dtype = torch.float64
    if isinstance(images, (list, tuple)):
        vecs = [embedder(torch.as_tensor(_as_np(im)[None], dtype=ref_dtype)) for im in images]
        return torch.cat(vecs).numpy()
    x = torch.as_tensor(_as_np(images), dtype=ref_dtype)
    return embedder(x).numpy()


def fid(sr_set, hr_set, embedder) -> float:
    if len(sr_set) == 0 or len(hr_set) == 0:
        raise ValueError("FID needs non-empty image sets")
    return frechet_distance(EmbeddingStats.from_vectors(embed(sr_set, embedder)),
                            EmbeddingStats.from_vectors(embed(hr_set, embedder)))


# -- reports ----------------------------------------------------------------

BASE_COLUMNS = ("scale", "psnr", "ssim", "fid")


@dataclass
class ScaleRow:
    scale: float
    psnr: float
    ssim: float
    fid: float
    extra: dict[str, float] = field(default_factory=dict)


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    return repr(float(v))


@dataclass
class MetricReport:
    rows: list[ScaleRow]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            if not (-1.0 - 1e-12 <= r.ssim <= 1.0 + 1e-12) and not math.isnan(r.ssim):
                raise ValueError(f"SSIM {r.ssim} outside [-1, 1] at scale {r.scale}")
            if r.fid < 0:
                raise ValueError(f"negative FID at scale {r.scale}")

    @property
    def scales(self) -> list[float]:
        return [r.scale for r in self.rows]

    def extra_columns(self) -> list[str]:
        cols: list[str] = []
        for r in self.rows:
            cols += [k for k in r.extra if k not in cols]
        return cols

    def mean_row(self) -> dict[str, float]:
        out = {}
        for col in BASE_COLUMNS[1:] + tuple(self.extra_columns()):
            vals = [getattr(r, col) if col in BASE_COLUMNS else r.extra.get(col, math.nan) for r in self.rows]
            out[col] = float(np.mean(vals)) if vals else math.nan
        return out

    def row(self, scale: float) -> ScaleRow:
        for r in self.rows:
            if math.isclose(r.scale, scale, abs_tol=1e-9):
                return r
        raise KeyError(scale)

    def table(self) -> list[list[str]]:
        extra = self.extra_columns()
        header = list(BASE_COLUMNS) + extra
        body = [[_fmt(r.scale), _fmt(r.psnr), _fmt(r.ssim), _fmt(r.fid)] + [_fmt(r.extra.get(c)) for c in extra]
                for r in self.rows]
        mean = self.mean_row()
        body.append(["mean"] + [_fmt(mean[c]) for c in header[1:]])
        return [header] + body

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows(self.table())
        path.with_suffix(".meta.json").write_text(json.dumps(self.metadata, sort_keys=True, indent=2) + "\n")
        return path

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        path = Path(path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        header, body = rows[0], rows[1:]
        out = []
        for rec in body:
            if rec[0] == "mean":
                continue
            vals = dict(zip(header, rec))
            extra = {k: float(v) for k, v in vals.items() if k not in BASE_COLUMNS}
            out.append(ScaleRow(float(vals["scale"]), float(vals["psnr"]), float(vals["ssim"]),
                                float(vals["fid"]), extra))
        meta_path = path.with_suffix(".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(out, meta)
