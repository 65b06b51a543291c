import numpy as np
import pytest
import torch

from arbsr.data import degrade, synth_phantom
from arbsr.evaluation import bicubic_baseline
from arbsr.generator import (ERB, Generator, GeneratorConfig, WeightPredictor, build_generator, count_params,
                             erb_forward, extract_features, generate, meta_upscale_dense, meta_upscale_local,
                             param_count, predict_weights)
from arbsr.metrics import psnr
from oracles import erb_direct


def _meta(w=4, m=1, k=3, hidden=16, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    net = WeightPredictor(w, m, k, hidden).to(dtype)
    with torch.no_grad():
        for p in net.parameters():
            p.uniform_(-0.5, 0.5)
    return net


# -- ERB ----------------------------------------------------------------------

def test_erb_zero_weights_is_identity():
    blk = ERB(6, 3, 1.0).double()
    for p in blk.parameters():
        torch.nn.init.zeros_(p)
    x = torch.randn(2, 6, 7, 5, dtype=torch.float64)
    assert torch.equal(blk(x), x)


def test_erb_alpha_zero_is_identity():
    blk = ERB(4, 3, 0.0).double()
    x = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    assert torch.equal(blk(x), x)


def test_erb_matches_direct_convolution():
    rng = np.random.default_rng(0)
    w, k = 3, 3
    p = {"conv1.weight": rng.normal(size=(w, w, k, k)), "conv1.bias": rng.normal(size=w),
         "conv2.weight": rng.normal(size=(w, w, k, k)), "conv2.bias": rng.normal(size=w)}
    x = rng.normal(size=(w, 6, 5))
    ref = erb_direct(x, p["conv1.weight"], p["conv1.bias"], p["conv2.weight"], p["conv2.bias"], 1.0)
    out = erb_forward(torch.as_tensor(x)[None], {k_: torch.as_tensor(v) for k_, v in p.items()}, 1.0)[0].numpy()
    assert np.max(np.abs(out - ref) / (np.abs(ref) + 1e-12)) < 1e-5


def test_erb_channel_mismatch():
    blk = ERB(4, 3, 1.0)
    with pytest.raises(ValueError, match="channels"):
        blk(torch.zeros(1, 3, 5, 5))


# -- feature extractor ---------------------------------------------------------

def test_features_shape_and_determinism():
    gen = build_generator(GeneratorConfig(depth=2, width=8, meta_hidden=16), seed=3)
    x = torch.rand(1, 1, 24, 24)
    a, b = extract_features(x, gen), extract_features(x, gen)
    assert a.shape == (1, 8, 24, 24) and torch.equal(a, b)


def test_depth_zero_is_tail_plus_head():
    gen = build_generator(GeneratorConfig(depth=0, width=5, meta_hidden=8), seed=1).double()
    x = torch.rand(1, 1, 9, 9, dtype=torch.float64)
    head = gen.head(x)
    assert torch.equal(extract_features(x, gen), gen.tail(head) + head)


def test_wrong_input_channels():
    gen = build_generator(GeneratorConfig(depth=1, width=4, meta_hidden=8))
    with pytest.raises(ValueError, match="channels"):
        gen.features(torch.zeros(1, 4, 8, 8))


def test_config_validation():
    for bad in (dict(depth=-1), dict(width=0), dict(kernel_size=2), dict(res_scale=-1.0), dict(channels=3),
                dict(meta_hidden=0)):
        with pytest.raises(ValueError):
            GeneratorConfig(**bad)


# -- weight prediction ---------------------------------------------------------

def test_meta_input_examples():
    net = _meta()
    mw = predict_weights(2.5, (20, 20), net)
    np.testing.assert_allclose(mw.meta_input(5, 7), (0.0, 0.8, 0.4), atol=1e-12)
    assert mw.source(5, 7) == (2, 2)
    mw2 = predict_weights(2.0, (12, 12), net)
    np.testing.assert_allclose(mw2.meta_input(3, 5), (0.5, 0.5, 0.5), atol=1e-15)
    assert torch.equal(mw2.kernel(0, 0), mw2.kernel(2, 4))
    assert mw2.n_kernels == 144
    assert mw2.full_kernels().shape == (12, 12, 1, 4, 3, 3)


def test_kernels_equal_meta_net_on_offsets():
    net = _meta()
    mw = predict_weights(1.7, (10, 10), net)
    for i, j in [(0, 0), (3, 7), (9, 2)]:
        x = torch.tensor(mw.meta_input(i, j), dtype=torch.float64)
        assert torch.allclose(mw.kernel(i, j), net(x).view(1, 4, 3, 3), rtol=0, atol=1e-15)


def test_inconsistent_out_dims_rejected():
    with pytest.raises(ValueError, match="inconsistent"):
        predict_weights(2.0, (13, 12), _meta(), lr_dims=(6, 6))


# -- upscale -------------------------------------------------------------------

@pytest.mark.parametrize("hw,s,out", [((24, 24), 1.5, (36, 36)), ((20, 20), 3.3, (66, 66)), ((6, 6), 2.0, (12, 12))])
def test_local_output_dims(hw, s, out):
    feat = torch.randn(1, 4, *hw, dtype=torch.float64)
    assert meta_upscale_local(feat, s, _meta()).shape[-2:] == out


def test_dense_zero_features_zero_output():
    net = _meta()
    with torch.no_grad():
        net[2].bias.zero_()
    out = meta_upscale_dense(torch.zeros(1, 4, 6, 6, dtype=torch.float64), 2.0, net)
    assert out.shape == (1, 1, 12, 12) and torch.count_nonzero(out) == 0


def test_dense_matches_local_single_case():
    net = _meta(w=3, m=2)
    feat = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    a, b = meta_upscale_local(feat, 1.7, net), meta_upscale_dense(feat, 1.7, net)
    assert ((a - b).norm() / b.norm()).item() < 1e-6


def test_dense_cap():
    with pytest.raises(MemoryError):
        meta_upscale_dense(torch.zeros(1, 4, 10, 10, dtype=torch.float64), 2.0, _meta(), max_elements=1000)


def test_upscale_linear_in_features():
    net = _meta()
    f1, f2 = torch.randn(1, 4, 7, 9, dtype=torch.float64), torch.randn(1, 4, 7, 9, dtype=torch.float64)
    lhs = meta_upscale_local(2.0 * f1 - 0.5 * f2, 2.3, net)
    rhs = 2.0 * meta_upscale_local(f1, 2.3, net) - 0.5 * meta_upscale_local(f2, 2.3, net)
    assert ((lhs - rhs).norm() / rhs.norm()).item() < 1e-6


def test_upscale_differentiable():
    net = _meta()
    feat = torch.randn(1, 4, 5, 5, dtype=torch.float64, requires_grad=True)
    meta_upscale_local(feat, 2.2, net).sum().backward()
    assert feat.grad is not None and net[0].weight.grad is not None


# -- generate ------------------------------------------------------------------

def test_one_model_serves_many_scales():
    gen = build_generator(GeneratorConfig(depth=1, width=8, meta_hidden=16))
    lr = np.random.default_rng(0).random((20, 22))
    for s in (1.5, 2.0, 2.5, 3.0, 3.5, 4.0):
        out = generate(lr, s, gen)
        assert tuple(out.shape) == (int(np.floor(s * 20 + 1e-9)), int(np.floor(s * 22 + 1e-9)))
        assert out.min() >= 0 and out.max() <= 1


def test_generate_layouts_and_clamp_flag():
    gen = build_generator(GeneratorConfig(depth=1, width=4, meta_hidden=8))
    x = torch.rand(2, 1, 6, 6)
    assert generate(x, 2.0, gen).shape == (2, 1, 12, 12)
    assert generate(x[0], 2.0, gen).shape == (1, 12, 12)
    raw = generate(x, 2.0, gen, clamp=False)
    assert torch.equal(raw, gen(x, 2.0))


def test_generate_deterministic():
    gen = build_generator(GeneratorConfig(depth=2, width=8, meta_hidden=16), seed=5).eval()
    x = torch.rand(1, 1, 10, 10)
    assert torch.equal(generate(x, 2.7, gen), generate(x, 2.7, gen))


def test_untrained_generator_worse_than_bicubic():
    hr = synth_phantom(0, (64, 64), 1).voxels[0, 8:56, 8:56]
    lr = degrade(hr, 2.0)
    gen = build_generator(GeneratorConfig(depth=2, width=16, meta_hidden=32), seed=0)
    with torch.no_grad():
        sr = generate(lr, 2.0, gen).numpy()
    assert psnr(sr, hr) < psnr(bicubic_baseline(lr, 2.0), hr)


def test_build_is_seeded():
    cfg = GeneratorConfig(depth=1, width=4, meta_hidden=8)
    a, b = build_generator(cfg, seed=2), build_generator(cfg, seed=2)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n


@pytest.mark.parametrize("cfg", [GeneratorConfig(), GeneratorConfig(depth=3, width=7, channels=4, meta_hidden=9),
                                 GeneratorConfig(depth=0, width=2, kernel_size=5, meta_hidden=3)])
def test_count_params_matches_module(cfg):
    assert count_params(cfg) == param_count(Generator(cfg))


def test_checkpoint_names_are_hierarchical():
    names = set(Generator(GeneratorConfig(depth=2, width=4, meta_hidden=8)).state_dict())
    assert {"head.weight", "body.0.conv1.weight", "body.1.conv2.bias", "tail.weight", "meta_net.0.weight",
            "meta_net.2.weight"} <= names
