"""Volume ingestion, LR degradation and scale-consistent patch sampling."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .resample import bicubic_resize, floor_dim, gaussian_blur_3x3

SCALE_MIN, SCALE_MAX = 1.0, 4.0

RAW_MAGIC = b"ARBSRVOL"
RAW_SUFFIX = ".vol"


class DataError(ValueError):
    pass


def check_scale(s: float) -> float:
    s = float(s)
    if not (SCALE_MIN < s <= SCALE_MAX):
        raise DataError(f"scale must lie in (1, 4], got {s}")
    return s


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    crop_height: int
    crop_width: int
    channels: int = 1
    # slicing axis of NIfTI inputs; raw/npy volumes are stored slice-first already
    plane: int = 2
    modality_names: tuple[str, ...] = ("image",)

    def __post_init__(self):
        if self.crop_height <= 0 or self.crop_width <= 0:
            raise DataError(f"profile {self.name}: crop dims must be positive")
        if self.channels not in (1, 4):
            raise DataError(f"profile {self.name}: channels must be 1 or 4")
        if len(self.modality_names) != self.channels:
            raise DataError(f"profile {self.name}: need {self.channels} modality names")


PROFILES: dict[str, DatasetProfile] = {
    "oasis": DatasetProfile("oasis", 144, 180, 1, 2, ("T1",)),
    "brats": DatasetProfile("brats", 180, 170, 4, 2, ("T1", "T1ce", "T2", "Flair")),
    "acdc": DatasetProfile("acdc", 128, 128, 1, 2, ("cine",)),
    "covid_ct": DatasetProfile("covid_ct", 412, 332, 1, 2, ("CT",)),
}


def phantom_profile(shape: tuple[int, int] = (64, 64), channels: int = 1) -> DatasetProfile:
    """Central three-quarter crop; synth_phantom keeps all signal inside it."""
    names = ("image",) if channels == 1 else ("T1", "T1ce", "T2", "Flair")
    return DatasetProfile("phantom", (3 * shape[0]) // 4, (3 * shape[1]) // 4, channels, 0, names)


def get_profile(name: str) -> DatasetProfile:
    if name == "phantom":
        return phantom_profile()
    if name.startswith("phantom"):
        # phantom<H>x<W>
        h, w = name[len("phantom"):].split("x")
        return phantom_profile((int(h), int(w)))
    try:
        return PROFILES[name]
    except KeyError:
        raise DataError(f"unknown dataset profile {name!r}; known: {sorted(PROFILES)} or phantom<H>x<W>")


@dataclass
class Volume:
    """Slice-first voxels: [S, H, W] for one modality, [S, m, H, W] for several."""
    voxels: np.ndarray
    modality_names: list[str] = field(default_factory=lambda: ["image"])
    value_range: tuple[float, float] = (0.0, 1.0)
    name: str = ""

    def __post_init__(self):
        if self.voxels.ndim not in (3, 4):
            raise DataError(f"volume must be 3D or 4D, got shape {self.voxels.shape}")
        if self.channels not in (1, 4):
            raise DataError(f"volume must carry 1 or 4 modalities, got {self.channels}")
        if not np.all(np.isfinite(self.voxels)):
            raise DataError("volume contains NaN or Inf voxels")

    @property
    def channels(self) -> int:
        return 1 if self.voxels.ndim == 3 else self.voxels.shape[1]

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]

    @property
    def slice_shape(self) -> tuple[int, int]:
        return self.voxels.shape[-2:]

    def slice(self, i: int) -> np.ndarray:
        """Slice ``i`` as a [m, H, W] array."""
        v = self.voxels[i]
        return v[None] if v.ndim == 2 else v


@dataclass
class SlicePair:
    hr: np.ndarray
    lr: np.ndarray
    scale: float


@dataclass
class PatchBatch:
    lr: np.ndarray  # [B, m, H_lr, W_lr]
    hr: np.ndarray  # [B, m, H_hr, W_hr]
    scale: float

    def __post_init__(self):
        h_lr, w_lr = self.lr.shape[-2:]
        if self.hr.shape[-2:] != (floor_dim(self.scale * h_lr), floor_dim(self.scale * w_lr)):
            raise DataError(
                f"HR dims {self.hr.shape[-2:]} do not match floor(s * LR dims) for s={self.scale}")
        if self.lr.shape[:2] != self.hr.shape[:2]:
            raise DataError("LR and HR batches disagree on batch size or channels")

    @property
    def batch_size(self) -> int:
        return self.lr.shape[0]


def normalize(volume: Volume) -> Volume:
    """Per-volume min-max rescale into [0, 1]."""
    v = volume.voxels
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        raise DataError("cannot normalize a constant volume")
    return replace(volume, voxels=(v - lo) / (hi - lo), value_range=(lo, hi))


# -- file formats -----------------------------------------------------------

def write_raw(path, voxels: np.ndarray, modality_names=None) -> Path:
    """Portable volume file: magic, uint32 header length, JSON header, float32 LE payload."""
    path = Path(path)
    arr = np.ascontiguousarray(voxels, dtype="<f4")
    header = json.dumps({
        "shape": list(arr.shape),
        "dtype": "<f4",
        "modality_names": list(modality_names or ["image"]),
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(arr.tobytes())
    return path


def read_raw(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(RAW_MAGIC):
        raise DataError(f"{path}: not an {RAW_MAGIC.decode()} file")
    off = len(RAW_MAGIC)
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off:off + n])
    off += n
    shape = tuple(header["shape"])
    payload = np.frombuffer(blob, dtype="<f4", offset=off)
    if payload.size != int(np.prod(shape)):
        raise DataError(f"{path}: payload holds {payload.size} values, header says {shape}")
    return payload.reshape(shape).astype(np.float64), header


def _read_array(path: Path, profile: DatasetProfile) -> tuple[np.ndarray, list[str] | None]:
    name = path.name.lower()
    try:
        if name.endswith((".nii", ".nii.gz", ".mgz", ".img", ".hdr")):
            import nibabel as nib
            arr = np.asarray(nib.load(str(path)).get_fdata(), dtype=np.float64)
            if arr.ndim == 4:
                # modality axis last in NIfTI; bring slices first, modalities second
                arr = np.moveaxis(arr, profile.plane, 0)
                arr = np.moveaxis(arr, -1, 1)
            else:
                arr = np.moveaxis(arr, profile.plane, 0)
            return arr, None
        if name.endswith(RAW_SUFFIX):
            arr, header = read_raw(path)
            return arr, header.get("modality_names")
        if name.endswith(".npy"):
            return np.load(path).astype(np.float64), None
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"unreadable volume file {path}: {exc}") from exc
    raise DataError(f"unsupported volume file type: {path}")


def center_crop_box(shape: tuple[int, int], profile: DatasetProfile) -> tuple[slice, slice]:
    h, w = shape
    if profile.crop_height > h or profile.crop_width > w:
        raise DataError(
            f"profile {profile.name} crop {profile.crop_height}x{profile.crop_width} "
            f"exceeds slice dims {h}x{w}")
    top = (h - profile.crop_height) // 2
    left = (w - profile.crop_width) // 2
    return slice(top, top + profile.crop_height), slice(left, left + profile.crop_width)


def crop_volume(voxels: np.ndarray, profile: DatasetProfile) -> np.ndarray:
    """Centre-crop every slice, refusing to drop any non-zero voxel."""
    if not np.all(np.isfinite(voxels)):
        raise DataError("volume contains NaN or Inf voxels")
    if not np.any(voxels):
        raise DataError("crop profile cannot be validated on empty volume")
    rows, cols = center_crop_box(voxels.shape[-2:], profile)
    keep = np.zeros(voxels.shape[-2:], dtype=bool)
    keep[rows, cols] = True
    outside = np.abs(voxels).reshape(-1, *keep.shape)[:, ~keep]
    n_lost = int(np.count_nonzero(outside))
    if n_lost:
        nz = np.argwhere(np.any(voxels.reshape(-1, *keep.shape) != 0, axis=0))
        (r0, c0), (r1, c1) = nz.min(0), nz.max(0)
        raise DataError(
            f"profile {profile.name} would discard {n_lost} non-zero voxels; "
            f"signal spans rows {r0}..{r1}, cols {c0}..{c1}, crop keeps "
            f"rows {rows.start}..{rows.stop - 1}, cols {cols.start}..{cols.stop - 1}")
    return voxels[..., rows, cols]


def load_volume(path, profile: DatasetProfile) -> Volume:
    path = Path(path)
    if not path.exists():
        raise DataError(f"volume file not found: {path}")
    arr, names = _read_array(path, profile)
    channels = 1 if arr.ndim == 3 else arr.shape[1]
    if arr.ndim not in (3, 4):
        raise DataError(f"{path}: expected a 3D or 4D array, got shape {arr.shape}")
    if channels != profile.channels:
        raise DataError(f"{path}: {channels} modalities but profile {profile.name} expects {profile.channels}")
    cropped = crop_volume(arr, profile)
    vol = Volume(cropped, list(names or profile.modality_names), name=path.stem)
    return normalize(vol)


def volume_from_array(voxels: np.ndarray, profile: DatasetProfile, name: str = "") -> Volume:
    """In-memory twin of load_volume for arrays already in slice-first layout."""
    cropped = crop_volume(np.asarray(voxels, dtype=np.float64), profile)
    return normalize(Volume(cropped, list(profile.modality_names), name=name))


# -- degradation ------------------------------------------------------------

def degrade(hr, s: float, noise_sigma: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Blur with the 3x3 Gaussian, cubic-downsample by s, optional additive noise, clamp to [0, 1].

    Output dims are ``(floor(H/s), floor(W/s))``.
    """
    s = check_scale(s)
    hr = np.asarray(hr, dtype=np.float64)
    h, w = hr.shape[-2:]
    out_shape = (floor_dim(h / s), floor_dim(w / s))
    lr = bicubic_resize(gaussian_blur_3x3(hr), 1.0 / s, out_shape=out_shape)
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        lr = lr + rng.normal(0.0, noise_sigma, size=lr.shape)
    return np.clip(lr, 0.0, 1.0)


def patch_dims(h_p: int, w_p: int, s: float) -> tuple[tuple[int, int], tuple[int, int]]:
    """((H_lr, W_lr), (H_hr, W_hr)) for a nominal HR patch of h_p x w_p at scale s."""
    h_lr, w_lr = floor_dim(h_p / s), floor_dim(w_p / s)
    return (h_lr, w_lr), (floor_dim(s * h_lr), floor_dim(s * w_lr))


def make_pair(hr_patch: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Degrade a nominal HR patch; returns (lr, hr cropped to floor(s * H_lr))."""
    lr = degrade(hr_patch, s)
    h_lr, w_lr = lr.shape[-2:]
    return lr, hr_patch[..., :floor_dim(s * h_lr), :floor_dim(s * w_lr)]


def _draw_patch(rng: np.random.Generator, volume_set: list[Volume], h_p: int, w_p: int) -> np.ndarray:
    vol = volume_set[int(rng.integers(len(volume_set)))]
    z = int(rng.integers(vol.n_slices))
    h, w = vol.slice_shape
    y = int(rng.integers(h - h_p + 1))
    x = int(rng.integers(w - w_p + 1))
    return vol.slice(z)[:, y:y + h_p, x:x + w_p]


def sample_patch_batch(volume_set: list[Volume], s: float, h_p: int, batch_size: int,
                       rng_seed, w_p: int | None = None) -> PatchBatch:
    s = check_scale(s)
    w_p = h_p if w_p is None else w_p
    if not volume_set:
        raise DataError("empty volume set")
    for vol in volume_set:
        h, w = vol.slice_shape
        if h_p > h or w_p > w:
            raise DataError(f"volume {vol.name or '?'} ({h}x{w}) smaller than patch {h_p}x{w_p}")
    rng = np.random.default_rng(rng_seed)
    lrs, hrs = [], []
    for _ in range(batch_size):
        lr, hr = make_pair(_draw_patch(rng, volume_set, h_p, w_p), s)
        lrs.append(lr)
        hrs.append(hr)
    return PatchBatch(np.stack(lrs), np.stack(hrs), s)


class VolumePatchSampler:
    """Random patches from a volume corpus; batch content is a pure function of the seed."""

    def __init__(self, volumes: list[Volume], patch_size: int, batch_size: int):
        self.volumes = volumes
        self.patch_size = patch_size
        self.batch_size = batch_size

    @property
    def channels(self) -> int:
        return self.volumes[0].channels

    def sample(self, s: float, seed) -> PatchBatch:
        return sample_patch_batch(self.volumes, s, self.patch_size, self.batch_size, seed)


class FixedPatchSet:
    """A fixed set of HR patches re-degraded at whatever scale is requested."""

    def __init__(self, hr_patches: np.ndarray):
        hr_patches = np.asarray(hr_patches, dtype=np.float64)
        if hr_patches.ndim == 3:
            hr_patches = hr_patches[:, None]
        self.hr_patches = hr_patches
        self._cache: dict[float, PatchBatch] = {}

    @property
    def channels(self) -> int:
        return self.hr_patches.shape[1]

    def sample(self, s: float, seed=None) -> PatchBatch:
        s = check_scale(s)
        if s not in self._cache:
            lr, hr = make_pair(self.hr_patches, s)
            self._cache[s] = PatchBatch(lr, np.ascontiguousarray(hr), s)
        return self._cache[s]

    @classmethod
    def from_volumes(cls, volumes: list[Volume], patch_size: int, n: int, seed: int) -> "FixedPatchSet":
        rng = np.random.default_rng(seed)
        return cls(np.stack([_draw_patch(rng, volumes, patch_size, patch_size) for _ in range(n)]))


# -- synthetic phantoms -----------------------------------------------------

def _smooth_ellipse(yy, xx, cy, cx, ay, ax, theta, edge):
    """1 inside, 0 outside, smoothstep ramp of ``edge`` pixels inside the boundary."""
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / ax
    v = (-s * dx + c * dy) / ay
    r = np.sqrt(u * u + v * v)
    depth = (1.0 - r) * min(ay, ax) / edge
    t = np.clip(depth, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def synth_phantom(seed: int, shape: tuple[int, int] = (64, 64), n_slices: int = 8,
                  channels: int = 1) -> Volume:
    """Head-like stack of overlapping smooth ellipses, zero outside the central 3/4 box."""
    h, w = shape
    if h < 32 or w < 32:
        raise DataError(f"phantom slices must be at least 32x32, got {h}x{w}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    n_inner = int(rng.integers(4, 8))
    inner = [dict(
        oy=rng.uniform(-0.45, 0.45), ox=rng.uniform(-0.45, 0.45),
        ay=rng.uniform(0.12, 0.4), ax=rng.uniform(0.12, 0.4),
        theta=rng.uniform(0, np.pi), amp=rng.uniform(-0.35, 0.45),
        drift=rng.uniform(-0.15, 0.15),
    ) for _ in range(n_inner)]
    tex = [dict(ky=rng.uniform(0.1, 0.5), kx=rng.uniform(0.1, 0.5), ph=rng.uniform(0, 2 * np.pi),
                amp=rng.uniform(0.02, 0.06)) for _ in range(3)]
    mod_gain = rng.uniform(0.6, 1.0, size=channels)
    mod_mix = rng.uniform(-1.0, 1.0, size=(channels, n_inner))

    vols = np.zeros((n_slices, channels, h, w))
    for z in range(n_slices):
        t = 0.0 if n_slices == 1 else 2.0 * z / (n_slices - 1) - 1.0
        shrink = np.sqrt(1.0 - 0.35 * t * t)
        hy, hx = 0.34 * h * shrink, 0.34 * w * shrink
        head = _smooth_ellipse(yy, xx, cy, cx, hy, hx, 0.0, 4.0)
        brain = _smooth_ellipse(yy, xx, cy, cx, hy - 3.0, hx - 3.0, 0.0, 4.0)
        for c in range(channels):
            img = 0.55 * head - 0.2 * (head - brain) + 0.15 * brain
            for k, e in enumerate(inner):
                blob = _smooth_ellipse(
                    yy, xx, cy + (e["oy"] + e["drift"] * t) * hy, cx + e["ox"] * hx,
                    e["ay"] * hy * shrink, e["ax"] * hx * shrink, e["theta"] + 0.3 * t, 6.0)
                amp = e["amp"] * (1.0 if c == 0 else mod_mix[c, k])
                img = img + amp * blob
            for q in tex:
                img = img + q["amp"] * np.sin(q["ky"] * yy + q["kx"] * xx + q["ph"] + t)
            vols[z, c] = np.clip(img * mod_gain[c], 0.0, None) * head
    vols /= vols.max()
    voxels = vols[:, 0] if channels == 1 else vols
    names = ["image"] if channels == 1 else ["T1", "T1ce", "T2", "Flair"]
    return Volume(voxels, names, (0.0, 1.0), name=f"phantom{seed}")


def volume_slices(volumes: list[Volume]) -> list[np.ndarray]:
    """Every slice of every volume as [m, H, W], in order."""
    return [v.slice(i) for v in volumes for i in range(v.n_slices)]
