import math

import numpy as np
import torch
import yaml
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from arbsr.config import parse_config
from arbsr.data import Volume, degrade, normalize, patch_dims
from arbsr.generator import GeneratorConfig, build_generator, generate, upscaled_dims
from arbsr.metrics import EmbeddingStats, frechet_distance, ssim
from arbsr.resample import floor_dim

SCALES = st.floats(min_value=1.01, max_value=4.0, allow_nan=False)
SMALL = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@SMALL
@given(st.integers(4, 12), st.integers(4, 12), SCALES)
def test_generator_shape_law(h, w, s):
    gen = _tiny_generator()
    with torch.no_grad():
        out = generate(torch.rand(1, 1, h, w), s, gen)
    assert tuple(out.shape[-2:]) == upscaled_dims((h, w), s) == (floor_dim(s * h), floor_dim(s * w))


_GEN = {}


def _tiny_generator():
    if "g" not in _GEN:
        _GEN["g"] = build_generator(GeneratorConfig(depth=0, width=4, meta_hidden=8), seed=0)
    return _GEN["g"]


@settings(max_examples=200, deadline=None)
@given(st.integers(8, 128), st.integers(8, 128), SCALES)
def test_hr_patch_within_nominal(h_p, w_p, s):
    (h_lr, w_lr), (h_hr, w_hr) = patch_dims(h_p, w_p, s)
    assume(h_lr >= 1 and w_lr >= 1)
    assert h_hr <= h_p and w_hr <= w_p
    assert h_hr == floor_dim(s * h_lr) and w_hr == floor_dim(s * w_lr)


@settings(max_examples=30, deadline=None)
@given(st.integers(16, 40), st.integers(16, 40), SCALES, SCALES)
def test_degrade_dims_monotone_in_scale(h, w, s1, s2):
    lo, hi = sorted((s1, s2))
    img = np.random.default_rng(0).random((h, w))
    a, b = degrade(img, lo), degrade(img, hi)
    assert a.shape[0] >= b.shape[0] and a.shape[1] >= b.shape[1]
    assert a.min() >= 0 and a.max() <= 1


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 6, 7), elements=st.floats(-1e3, 1e3)))
def test_normalize_idempotent(vox):
    assume(vox.max() - vox.min() > 1e-6)
    once = normalize(Volume(vox))
    twice = normalize(once)
    assert once.voxels.min() == 0.0 and abs(once.voxels.max() - 1.0) < 1e-12
    np.testing.assert_allclose(twice.voxels, once.voxels, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 12, 12), elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(pair):
    a, b = pair
    v = ssim(a, b)
    assert abs(v - ssim(b, a)) < 1e-12 and -1 - 1e-12 <= v <= 1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 31))
def test_frechet_symmetric_nonnegative(d, seed):
    rng = np.random.default_rng(seed)
    stats = []
    for _ in range(2):
        m = rng.normal(size=(d, d))
        stats.append(EmbeddingStats(rng.normal(size=d), m @ m.T + 1e-3 * np.eye(d)))
    ab, ba = frechet_distance(*stats), frechet_distance(*reversed(stats))
    assert ab >= 0 and abs(ab - ba) <= 1e-7 * max(1.0, ab)


WEIGHT = st.one_of(st.just(math.inf), st.floats(0, 10, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(1, 256), st.floats(0, 10, allow_nan=False), WEIGHT,
       st.sampled_from(["vanilla", "wgan", "wgangp", "ragan"]),
       st.lists(st.sampled_from([1.5, 2.0, 2.5, 3.0, 4.0]), min_size=1, max_size=5))
def test_config_dump_roundtrip(depth, width, gamma, eta, variant, grid):
    assume(not (gamma == math.inf and eta == math.inf))
    raw = {"model": {"depth": depth, "width": width}, "loss": {"gamma": gamma, "eta": eta, "variant": variant},
           "schedule": {"scale_grid": grid}}
    cfg = parse_config(raw)
    assert parse_config(yaml.safe_load(cfg.dump())) == cfg
