import math

import numpy as np
import pytest

from arbsr import data as D
from arbsr.data import (DataError, FixedPatchSet, Volume, VolumePatchSampler, degrade, get_profile,
                        load_volume, make_pair, normalize, patch_dims, read_raw, sample_patch_batch,
                        synth_phantom, volume_from_array, write_raw)
from arbsr.resample import floor_dim
from oracles import bicubic_bruteforce, gaussian_blur_direct


# -- degradation --------------------------------------------------------------

@pytest.mark.parametrize("s", [1.1, 1.5, 2.0, 3.3, 4.0])
def test_degrade_constant_image(s):
    out = degrade(np.full((30, 30), 0.6), s)
    np.testing.assert_allclose(out, 0.6, atol=1e-12)


def test_degrade_dims():
    assert degrade(np.zeros((96, 96)), 2.0).shape == (48, 48)
    assert degrade(np.zeros((96, 80)), 2.5).shape == (38, 32)


def test_degrade_bright_pixel_matches_oracle():
    img = np.zeros((9, 9))
    img[4, 4] = 1.0
    s = 1.5
    ref = bicubic_bruteforce(gaussian_blur_direct(img), 1 / s, out_shape=(6, 6))
    out = degrade(img, s)
    assert out.shape == (6, 6)
    assert np.max(np.abs(out - np.clip(ref, 0, 1))) < 1e-6


@pytest.mark.parametrize("s", [1.0, 0.5, 4.01, -2.0])
def test_degrade_rejects_bad_scale(s):
    with pytest.raises(DataError):
        degrade(np.zeros((8, 8)), s)


def test_degrade_noise_hook_is_seeded_and_clamped():
    img = np.full((16, 16), 0.5)
    a = degrade(img, 2.0, noise_sigma=0.1, rng=np.random.default_rng(3))
    b = degrade(img, 2.0, noise_sigma=0.1, rng=np.random.default_rng(3))
    assert np.array_equal(a, b) and a.std() > 0 and a.min() >= 0 and a.max() <= 1


# -- patches ------------------------------------------------------------------

@pytest.mark.parametrize("s,lr,hr", [(3.0, 32, 96), (2.5, 38, 95), (1.05, 91, 95), (2.0, 48, 96), (4.0, 24, 96)])
def test_patch_dims_examples(s, lr, hr):
    assert patch_dims(96, 96, s) == ((lr, lr), (hr, hr))


def _phantoms(n=2, shape=(64, 64)):
    return [synth_phantom(i, shape, 4) for i in range(n)]


def test_sample_patch_batch_shapes_and_determinism():
    vols = _phantoms()
    a = sample_patch_batch(vols, 2.5, 40, 3, rng_seed=7)
    b = sample_patch_batch(vols, 2.5, 40, 3, rng_seed=7)
    assert a.lr.shape == (3, 1, 16, 16) and a.hr.shape == (3, 1, 40, 40)
    assert a.scale == 2.5
    assert a.lr.tobytes() == b.lr.tobytes() and a.hr.tobytes() == b.hr.tobytes()
    c = sample_patch_batch(vols, 2.5, 40, 3, rng_seed=8)
    assert not np.array_equal(a.hr, c.hr)


def test_patch_lr_is_degraded_hr_patch():
    vols = _phantoms()
    batch = sample_patch_batch(vols, 3.0, 33, 2, rng_seed=0)
    for lr, hr in zip(batch.lr, batch.hr):
        np.testing.assert_array_equal(lr, degrade(hr, 3.0))


def test_patch_larger_than_volume_rejected():
    with pytest.raises(DataError, match="smaller than patch"):
        sample_patch_batch(_phantoms(1, (32, 32)), 2.0, 40, 1, rng_seed=0)


def test_sampler_and_fixed_set():
    vols = _phantoms()
    sampler = VolumePatchSampler(vols, 24, 5)
    assert sampler.sample(2.0, 1).hr.shape == (5, 1, 24, 24)
    fixed = FixedPatchSet.from_volumes(vols, 16, 4, seed=0)
    b1, b2 = fixed.sample(1.5), fixed.sample(1.5, seed=99)
    assert b1 is b2 and b1.lr.shape == (4, 1, 10, 10) and b1.hr.shape == (4, 1, 15, 15)
    assert fixed.channels == 1


def test_make_pair_crops_hr():
    lr, hr = make_pair(np.random.default_rng(0).random((1, 17, 17)), 2.0)
    assert lr.shape == (1, 8, 8) and hr.shape == (1, 16, 16)


# -- phantoms -----------------------------------------------------------------

def test_phantom_contract():
    a, b = synth_phantom(3, (64, 64), 8), synth_phantom(3, (64, 64), 8)
    assert a.voxels.shape == (8, 64, 64)
    assert np.array_equal(a.voxels, b.voxels)
    assert a.voxels.min() >= 0 and a.voxels.max() <= 1
    c = synth_phantom(4, (64, 64), 8)
    assert np.mean(a.voxels != c.voxels) >= 0.01
    assert not np.array_equal(a.voxels[0], a.voxels[-1])


def test_phantom_size_check_and_channels():
    with pytest.raises(DataError):
        synth_phantom(0, (31, 64))
    v = synth_phantom(0, (48, 48), 3, channels=4)
    assert v.voxels.shape == (3, 4, 48, 48) and v.channels == 4


def test_phantom_signal_fits_phantom_crop():
    vol = synth_phantom(11, (64, 64), 6)
    out = volume_from_array(vol.voxels, get_profile("phantom64x64"))
    assert out.slice_shape == (48, 48)


# -- ingestion ----------------------------------------------------------------

def _padded_volume(profile_name, n=3, seed=0):
    p = get_profile(profile_name)
    h, w = p.crop_height + 20, p.crop_width + 12
    rng = np.random.default_rng(seed)
    shape = (n, h, w) if p.channels == 1 else (n, p.channels, h, w)
    vox = np.zeros(shape)
    inner = rng.random(shape[:-2] + (p.crop_height, p.crop_width)) * 500 + 10
    vox[..., 10:10 + p.crop_height, 6:6 + p.crop_width] = inner
    return vox


@pytest.mark.parametrize("name,dims", [("oasis", (144, 180)), ("acdc", (128, 128)), ("brats", (180, 170)),
                                       ("covid_ct", (412, 332))])
def test_load_volume_crops_and_normalizes(tmp_path, name, dims):
    path = write_raw(tmp_path / "v.vol", _padded_volume(name), None if name != "brats" else
                     ["T1", "T1ce", "T2", "Flair"])
    vol = load_volume(path, get_profile(name))
    assert vol.slice_shape == dims
    assert vol.voxels.min() == 0.0 and vol.voxels.max() == 1.0
    assert vol.value_range[0] < vol.value_range[1]


def test_load_volume_nifti(tmp_path):
    nib = pytest.importorskip("nibabel")
    vox = _padded_volume("acdc")  # [S, H, W]
    arr = np.moveaxis(vox, 0, 2)  # NIfTI order H, W, S with slices on axis 2
    nib.save(nib.Nifti1Image(arr.astype(np.float32), np.eye(4)), str(tmp_path / "v.nii.gz"))
    vol = load_volume(tmp_path / "v.nii.gz", get_profile("acdc"))
    assert vol.voxels.shape == (vox.shape[0], 128, 128)


def test_load_volume_npy(tmp_path):
    np.save(tmp_path / "v.npy", _padded_volume("acdc"))
    assert load_volume(tmp_path / "v.npy", get_profile("acdc")).slice_shape == (128, 128)


def test_empty_volume_rejected(tmp_path):
    path = write_raw(tmp_path / "z.vol", np.zeros((2, 200, 200)))
    with pytest.raises(DataError, match="crop profile cannot be validated on empty volume"):
        load_volume(path, get_profile("oasis"))


def test_crop_discarding_signal_rejected(tmp_path):
    vox = _padded_volume("acdc")
    vox[0, 0, 0] = 1.0
    with pytest.raises(DataError, match="discard 1 non-zero"):
        load_volume(write_raw(tmp_path / "v.vol", vox), get_profile("acdc"))


def test_nonfinite_and_unreadable_inputs(tmp_path):
    vox = _padded_volume("acdc")
    vox[0, 50, 50] = np.nan
    with pytest.raises(DataError, match="NaN"):
        load_volume(write_raw(tmp_path / "n.vol", vox), get_profile("acdc"))
    (tmp_path / "bad.vol").write_bytes(b"garbage")
    with pytest.raises(DataError):
        load_volume(tmp_path / "bad.vol", get_profile("acdc"))
    with pytest.raises(DataError, match="not found"):
        load_volume(tmp_path / "missing.vol", get_profile("acdc"))
    (tmp_path / "x.txt").write_text("1")
    with pytest.raises(DataError, match="unsupported"):
        load_volume(tmp_path / "x.txt", get_profile("acdc"))


def test_channel_mismatch_rejected(tmp_path):
    with pytest.raises(DataError, match="modalities"):
        load_volume(write_raw(tmp_path / "v.vol", _padded_volume("acdc")), get_profile("brats"))


def test_raw_roundtrip(tmp_path):
    vox = np.random.default_rng(0).random((2, 4, 5, 6)).astype(np.float32)
    arr, header = read_raw(write_raw(tmp_path / "r.vol", vox, ["a", "b", "c", "d"]))
    assert np.array_equal(arr, vox) and header["modality_names"] == ["a", "b", "c", "d"]


def test_normalize_idempotent_and_constant():
    v = Volume(np.random.default_rng(0).random((2, 5, 5)))
    once = normalize(v)
    twice = normalize(once)
    assert np.array_equal(once.voxels, twice.voxels)
    with pytest.raises(DataError):
        normalize(Volume(np.ones((2, 3, 3))))


def test_profiles():
    assert get_profile("oasis").crop_height == 144 and get_profile("oasis").crop_width == 180
    assert get_profile("brats").channels == 4
    assert get_profile("covid_ct").crop_height == 412 and get_profile("covid_ct").crop_width == 332
    assert get_profile("phantom96x80").crop_width == 60
    with pytest.raises(DataError):
        get_profile("nope")


def test_volume_invariants():
    with pytest.raises(DataError):
        Volume(np.zeros((2, 3)))
    with pytest.raises(DataError):
        Volume(np.zeros((2, 3, 4, 4)))
    with pytest.raises(DataError):
        Volume(np.full((2, 4, 4), np.inf))


def test_scale_bounds():
    assert D.check_scale(4.0) == 4.0
    assert math.isclose(floor_dim(2.5 * 38), 95)
