from dataclasses import replace

import numpy as np
import pytest

from oracles import dwconv_loop
from secvit.model import (
    PRESETS,
    SECViT,
    BlockConfig,
    BlockParams,
    ModelConfig,
    cpe,
    ffn,
    secvit_block,
    secvit_forward,
)
from secvit.nn import LinearParams
from secvit.tensor import Tensor, no_grad


def zeros_like_linear(p):
    return LinearParams(Tensor(np.zeros(p.weight.shape)), Tensor(np.zeros(p.bias.shape)))


# ---------------------------------------------------------------- cpe / ffn


def test_cpe_zero_kernel_is_identity(rng):
    X = Tensor(rng.normal(size=(3, 4, 4)))
    assert np.array_equal(cpe(X, Tensor(np.zeros((3, 3, 3)))).data, X.data)


def test_cpe_delta_kernel_doubles(rng):
    X = Tensor(rng.normal(size=(3, 4, 4)))
    k = np.zeros((3, 3, 3))
    k[:, 1, 1] = 1
    np.testing.assert_array_equal(cpe(X, Tensor(k)).data, 2 * X.data)


def test_cpe_matches_conv_oracle(rng):
    x, k = rng.normal(size=(2, 5, 6)), rng.normal(size=(2, 3, 3))
    np.testing.assert_allclose(cpe(Tensor(x), Tensor(k)).data, x + dwconv_loop(x, k), atol=1e-12)


def test_ffn_zero_weights(rng):
    cfg = BlockConfig(4, 1)
    p = BlockParams.init(rng, cfg)
    out = ffn(Tensor(rng.normal(size=(5, 4))), zeros_like_linear(p.fc1), zeros_like_linear(p.fc2))
    assert np.array_equal(out.data, np.zeros((5, 4)))


def test_ffn_bias_path(rng):
    # zero weights, gelu(0) = 0: only the second bias survives
    cfg = BlockConfig(4, 1)
    p = BlockParams.init(rng, cfg)
    fc2 = zeros_like_linear(p.fc2)
    fc2.bias.data[:] = [1.0, -2.0, 0.5, 3.0]
    out = ffn(Tensor(rng.normal(size=(3, 4))), zeros_like_linear(p.fc1), fc2)
    np.testing.assert_array_equal(out.data, np.tile([1.0, -2.0, 0.5, 3.0], (3, 1)))


def test_ffn_hidden_width():
    assert BlockConfig(64, 2).hidden_dim == 192


@pytest.mark.parametrize("kw", [dict(ffn_ratio=0), dict(num_clusters=0), dict(num_heads=3), dict(attention="x")])
def test_block_config_validation(kw):
    args = dict(model_dim=8, num_heads=2) | kw
    with pytest.raises(ValueError):
        BlockConfig(**args)


# ---------------------------------------------------------------- block


def test_block_with_zeroed_branches_is_cpe(rng):
    cfg = BlockConfig(4, 2, num_clusters=2)
    p = BlockParams.init(rng, cfg)
    p.attn.wo = zeros_like_linear(p.attn.wo)
    p.fc2 = zeros_like_linear(p.fc2)
    X = Tensor(rng.normal(size=(4, 4, 4)))
    np.testing.assert_allclose(secvit_block(X, cfg, p).data, cpe(X, p.cpe_kernel, p.cpe_bias).data, atol=1e-14)


def test_block_one_cluster_equals_full(rng):
    cfg = BlockConfig(8, 2, num_clusters=1)
    p = BlockParams.init(rng, cfg)
    X = Tensor(rng.normal(size=(8, 4, 5)))
    full = secvit_block(X, replace(cfg, attention="full"), p).data
    np.testing.assert_allclose(secvit_block(X, cfg, p).data, full, atol=1e-10)


def test_block_rejects_too_few_tokens(rng):
    cfg = BlockConfig(4, 1, num_clusters=5)
    with pytest.raises(ValueError):
        secvit_block(Tensor(np.zeros((4, 2, 2))), cfg, BlockParams.init(rng, cfg))


def test_block_batched(rng):
    cfg = BlockConfig(4, 2, num_clusters=3)
    p = BlockParams.init(rng, cfg)
    X = rng.normal(size=(2, 4, 3, 4))
    out = secvit_block(Tensor(X), cfg, p).data
    for b in range(2):
        np.testing.assert_allclose(out[b], secvit_block(Tensor(X[b]), cfg, p).data, atol=1e-13)


# ---------------------------------------------------------------- configs and presets


def test_secvit_t_preset():
    cfg = PRESETS["secvit-t"]
    assert cfg.stage_depths == (2, 2, 9, 2)
    assert cfg.stage_channels == (64, 128, 256, 512)
    assert cfg.stage_heads == (2, 4, 8, 16)
    assert cfg.ffn_ratio == 3
    assert cfg.stage_clusters == (32, 8, 2, 1)
    n = SECViT.init(cfg, seed=0, dtype=np.float32).num_parameters()
    assert 12e6 <= n <= 18e6


@pytest.mark.parametrize(
    "kw",
    [
        dict(stage_heads=(2,)),
        dict(stage_channels=(33, 64)),
        dict(stem_strides=(2, 2, 2)),
        dict(stem_norm="batch"),
        dict(num_classes=0),
    ],
)
def test_model_config_validation(kw):
    with pytest.raises(ValueError):
        replace(PRESETS["toy"], **kw)


def test_downsample_factors():
    assert PRESETS["secvit-t"].downsample_factor == 32
    assert PRESETS["toy"].downsample_factor == 8


# ---------------------------------------------------------------- network


@pytest.fixture(scope="module")
def toy():
    return SECViT.init(PRESETS["toy"], seed=0)


def test_toy_forward_shape(toy):
    x = Tensor(np.random.default_rng(0).random((2, 1, 32, 32)))
    with no_grad():
        logits = toy(x)
    assert logits.shape == (2, 10) and np.all(np.isfinite(logits.data))
    with no_grad():
        single = secvit_forward(Tensor(x.data[0]), PRESETS["toy"], toy)
    np.testing.assert_allclose(single.data, logits.data[0], atol=1e-12)


def test_toy_feature_shapes_and_hooks(toy):
    seen = []
    toy.hooks.append(lambda s, f: seen.append((s, f.shape)))
    try:
        with no_grad():
            toy.features(Tensor(np.zeros((1, 32, 32))))
    finally:
        toy.hooks.clear()
    assert seen == [(0, (32, 8, 8)), (1, (64, 4, 4))]


def test_forward_is_deterministic():
    cfg = PRESETS["toy"]
    x = Tensor(np.random.default_rng(1).random((1, 1, 32, 32)))
    a = SECViT.init(cfg, seed=7)(x).data
    b = SECViT.init(cfg, seed=7)(x).data
    assert np.array_equal(a, b)
    c = SECViT.init(cfg, seed=8)(x).data
    assert not np.array_equal(a, c)


def test_indivisible_resolution(toy):
    with pytest.raises(ValueError):
        toy(Tensor(np.zeros((1, 1, 30, 32))))


def test_parameter_names_and_state_roundtrip(toy):
    names = toy.named_parameters()
    assert "stage0.block1.attn.wq.weight" in names
    assert "stage1.block0.cpe.kernel" in names
    assert "down1.conv.weight" in names and "head.fc.bias" in names
    other = SECViT.init(PRESETS["toy"], seed=3)
    other.load_state({k: v.data for k, v in names.items()})
    for k, v in other.named_parameters().items():
        assert np.array_equal(v.data, names[k].data)
    with pytest.raises(KeyError):
        other.load_state({})


def test_model_gradients_reach_every_parameter():
    from secvit.tensor import cross_entropy_logits

    cfg = ModelConfig((1, 1), (8, 16), (2, 2), (4, 1), num_classes=3, in_channels=1)
    model = SECViT.init(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).random((2, 1, 16, 16)))
    cross_entropy_logits(model(x), [0, 2]).backward()
    for name, p in model.named_parameters().items():
        assert p.grad is not None and p.grad.shape == p.shape, name
