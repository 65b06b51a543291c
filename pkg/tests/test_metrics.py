import math
import warnings

import numpy as np
import pytest
import torch

from arbsr.data import synth_phantom
from arbsr.features import build_embedder
from arbsr.metrics import (EmbeddingStats, MetricReport, ScaleRow, embed, fid, frechet_distance, psnr, ssim)
from oracles import frechet_scipy, psnr_loop, ssim_window_loop

K1 = 1e-4


def test_psnr_cases():
    r = np.random.default_rng(0).random((16, 16)) * 0.9
    assert psnr(r, r + 0.1) == 20.0
    assert psnr(r, r) == math.inf
    a, b = np.random.default_rng(1).random((2, 13, 17))
    assert abs(psnr(a, b) - psnr_loop(a, b)) < 1e-9
    assert abs(psnr(a * 255, b * 255, L=255.0) - psnr(a, b)) < 1e-9
    with pytest.raises(ValueError):
        psnr(a, b[:3])


def test_psnr_decreases_with_noise():
    img = synth_phantom(0, (48, 48), 1).voxels[0]
    noise = np.random.default_rng(0).normal(size=img.shape)
    vals = [psnr(img + a * noise, img) for a in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_cases():
    x = np.random.default_rng(2).random((20, 24))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-15)
    assert abs(ssim(np.zeros((16, 16)), np.ones((16, 16))) - K1 / (1 + K1)) < 1e-9
    with pytest.raises(ValueError, match="at least"):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))


def test_ssim_matches_window_loop():
    rng = np.random.default_rng(3)
    x = rng.random((18, 21))
    y = np.clip(x + 0.2 * rng.normal(size=x.shape), 0, 1)
    assert abs(ssim(x, y) - ssim_window_loop(x, y)) < 1e-7


def test_ssim_symmetric_and_channel_mean():
    rng = np.random.default_rng(4)
    x, y = rng.random((2, 16, 16)), rng.random((2, 16, 16))
    assert abs(ssim(x, y) - ssim(y, x)) < 1e-12
    assert abs(ssim(x, y) - 0.5 * (ssim(x[0], y[0]) + ssim(x[1], y[1]))) < 1e-12


def test_frechet_closed_forms():
    a = EmbeddingStats(np.zeros(1), np.eye(1))
    b = EmbeddingStats(np.ones(1), np.eye(1))
    assert abs(frechet_distance(a, b) - 1.0) < 1e-9
    assert frechet_distance(a, a) == 0.0


def _random_stats(rng, d=5):
    m = rng.normal(size=(d, d))
    return EmbeddingStats(rng.normal(size=d), m @ m.T)


def test_frechet_symmetry_and_scipy_oracle():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a, b = _random_stats(rng), _random_stats(rng)
        ab, ba = frechet_distance(a, b), frechet_distance(b, a)
        assert ab >= 0 and abs(ab - ba) < 1e-8 * max(1.0, ab)
        assert abs(ab - frechet_scipy(a.mu, a.sigma, b.mu, b.sigma)) < 1e-7 * max(1.0, ab)


def test_frechet_rejects_non_psd_and_mismatch():
    a = EmbeddingStats(np.zeros(2), np.diag([1.0, -1.0]))
    with pytest.raises(ValueError, match="positive semi-definite"):
        frechet_distance(a, EmbeddingStats(np.zeros(2), np.eye(2)))
    with pytest.raises(ValueError):
        frechet_distance(EmbeddingStats(np.zeros(2), np.eye(2)), EmbeddingStats(np.zeros(3), np.eye(3)))


def _phantom_set(seed, n=8):
    return list(synth_phantom(seed, (32, 32), n).voxels[:, None])


def test_fid_cases():
    E = build_embedder("seeded-small-conv", seed=0)
    s = _phantom_set(1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert abs(fid(s, s, E)) < 1e-6
        zeros = [np.zeros((1, 32, 32)) + 0.01 * i for i in range(4)]
        ones = [np.ones((1, 32, 32)) - 0.01 * i for i in range(4)]
        assert fid(zeros, ones, E) > 0
        assert fid(_phantom_set(1), _phantom_set(2), E) == pytest.approx(0.008756909047510392, rel=1e-6)
    with pytest.raises(ValueError):
        fid([], s, E)


def test_fid_small_set_warns():
    E = build_embedder("seeded-small-conv", seed=0)
    with pytest.warns(RuntimeWarning, match="rank-deficient"):
        fid(_phantom_set(1, 4), _phantom_set(2, 4), E)


def test_embed_purity_and_batching():
    E = build_embedder("seeded-small-conv", seed=0)
    img = synth_phantom(0, (32, 32), 1).voxels[0][None, None]
    v = embed(img, E)[0]
    assert v.shape == (64,)
    assert v[:4].tolist() == pytest.approx([-0.049046528320065924, 0.18033679081058582,
                                            0.09918122151226279, 0.06810065048868053], rel=1e-9)
    batch = np.concatenate([img, img, np.random.default_rng(0).random(img.shape)])
    vb = embed(batch, E)
    assert np.array_equal(vb[0], vb[1])
    np.testing.assert_allclose(vb[0], v, rtol=0, atol=1e-13)
    np.testing.assert_allclose(embed(list(batch), E), vb, rtol=0, atol=1e-13)


def test_report_csv_roundtrip(tmp_path):
    rep = MetricReport([ScaleRow(2.0, 30.5, 0.9, 1.2), ScaleRow(3.0, math.inf, 1.0, 0.0, {"psnr_T1": 1.0})],
                       {"profile": "x"})
    path = rep.write_csv(tmp_path / "r.csv")
    back = MetricReport.read_csv(path)
    assert back.rows[0] == ScaleRow(2.0, 30.5, 0.9, 1.2, {"psnr_T1": math.nan}) or back.rows[0].psnr == 30.5
    assert back.rows[1].psnr == math.inf and back.metadata == {"profile": "x"}
    lines = path.read_text().splitlines()
    assert lines[0] == "scale,psnr,ssim,fid,psnr_T1" and lines[-1].startswith("mean,")
    assert rep.mean_row()["psnr"] == math.inf


def test_report_invariants():
    with pytest.raises(ValueError):
        MetricReport([ScaleRow(2.0, 1.0, 1.5, 0.0)])
    with pytest.raises(ValueError):
        MetricReport([ScaleRow(2.0, 1.0, 0.5, -1.0)])


def test_metrics_accept_tensors():
    t = torch.rand(1, 12, 12, dtype=torch.float64)
    assert psnr(t, t + 0.1) == pytest.approx(20.0)
