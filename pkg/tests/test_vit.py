import math

import numpy as np
import pytest

from mpfgvc.config import ViTConfig, default_k, scaled_k
from mpfgvc.errors import ConfigError
from mpfgvc.nn import MultiHeadSelfAttention, TransformerLayer, zero_module
from mpfgvc.tensor import Tensor
from mpfgvc.vit import (
    TokenSequence,
    VisionTransformer,
    encode_image,
    patchify,
    patchify_and_embed,
    transformer_layer,
)


def small_vit(**overrides):
    params = dict(image_side=8, patch_size=4, channels=1, dim=8, depth=2, heads=2, mlp_ratio=2, k=2)
    params.update(overrides)
    cfg = ViTConfig(**params)
    return cfg, VisionTransformer(cfg, np.random.default_rng(0))


def images(cfg, batch=2, seed=1):
    side = cfg.image_side
    return np.random.default_rng(seed).random((batch, side, side, cfg.channels))


def test_patchify_row_major():
    cfg = ViTConfig(image_side=4, patch_size=2, channels=1, dim=4, depth=2, heads=1, k=1)
    img = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    patches = patchify(img, cfg)
    assert patches.shape == (1, 4, 4)
    np.testing.assert_array_equal(patches[0, 1], [2, 3, 6, 7])
    np.testing.assert_array_equal(patches[0, 2], [8, 9, 12, 13])


def test_patchify_rejects_wrong_geometry():
    cfg, _ = small_vit()
    with pytest.raises(ConfigError):
        patchify(np.zeros((1, 9, 9, 1)), cfg)
    with pytest.raises(ConfigError):
        patchify(np.zeros((1, 8, 8, 3)), cfg)


def test_zero_weights_make_layer_identity(float64):
    layer = TransformerLayer(8, 2, 2, np.random.default_rng(0))
    zero_module(layer.attn)
    zero_module(layer.mlp)
    x = Tensor(np.random.default_rng(2).standard_normal((1, 5, 8)))
    out, _ = layer(x)
    assert out.data.tobytes() == x.data.tobytes()


def test_single_head_attention_matches_scalar_oracle(float64):
    attn = MultiHeadSelfAttention(2, 1, np.random.default_rng(0))
    for lin in (attn.wq, attn.wk, attn.wv, attn.wo):
        lin.weight.data = np.eye(2)
        lin.bias.data = np.zeros(2)
    x = np.array([[0.5, -1.0], [2.0, 0.25]])
    out, _ = attn(Tensor(x[None]))
    expected = np.zeros((2, 2))
    for i in range(2):
        logits = [(x[i, 0] * x[j, 0] + x[i, 1] * x[j, 1]) / math.sqrt(2) for j in range(2)]
        weights = [math.exp(v) for v in logits]
        total = sum(weights)
        for d in range(2):
            expected[i, d] = sum(weights[j] / total * x[j, d] for j in range(2))
    np.testing.assert_allclose(out.data[0], expected, atol=1e-10, rtol=0)


def test_capture_shape_range_and_no_perturbation(float64):
    cfg, vit = small_vit()
    seq = patchify_and_embed(images(cfg), cfg, vit)
    plain, none_rec, _ = transformer_layer(seq, vit.layers[0])
    captured, rec, _ = transformer_layer(seq, vit.layers[0], capture_attention=True)
    assert none_rec is None
    assert rec.A.shape == (2, cfg.heads, cfg.num_patches)
    assert np.all((rec.A >= 0) & (rec.A <= 1))
    assert plain.tokens.data.tobytes() == captured.tokens.data.tobytes()


def test_capture_needs_class_token():
    cfg, vit = small_vit()
    seq = TokenSequence(Tensor(np.zeros((1, 4, 8))), 0, includes_class=False)
    with pytest.raises(ConfigError):
        transformer_layer(seq, vit.layers[0], capture_attention=True)


def test_final_layer_input_length():
    cfg, vit = small_vit()
    on = encode_image(images(cfg), vit, use_ssvp=True)
    off = encode_image(images(cfg), vit, use_ssvp=False)
    assert on.final_input_length == cfg.k + 1
    assert off.final_input_length == cfg.num_patches + 1
    assert on.e_v.shape == (2, cfg.dim)
    assert on.selected_ids.shape == (2, cfg.k)
    assert off.ssvp_applied is False


def test_full_k_keeps_every_patch():
    cfg, vit = small_vit(k=4)
    enc = encode_image(images(cfg), vit)
    for row in enc.selected_ids:
        assert sorted(row.tolist()) == [0, 1, 2, 3]


def test_pinned_selection_is_used():
    cfg, vit = small_vit()
    enc = encode_image(images(cfg), vit, selected_ids=np.array([3, 1]))
    assert enc.selected_ids.tolist() == [[3, 1], [3, 1]]


def test_encoding_is_deterministic():
    cfg, _ = small_vit()
    a = VisionTransformer(cfg, np.random.default_rng(9))
    b = VisionTransformer(cfg, np.random.default_rng(9))
    x = images(cfg)
    assert encode_image(x, a).e_v.data.tobytes() == encode_image(x, b).e_v.data.tobytes()


def test_k_rules():
    assert scaled_k(784) == 14
    assert scaled_k(64) == 1
    assert default_k(64) == 4 and default_k(784) == 14 and default_k(4) == 4
    assert default_k(1) == 1
    assert ViTConfig().k == 4
    assert ViTConfig(image_side=16, patch_size=4).k == 4
    assert ViTConfig(k=3).k == 3
    with pytest.raises(ConfigError):
        ViTConfig(image_side=8, patch_size=4, channels=1, dim=8, depth=2, heads=2, k=5)
    with pytest.raises(ConfigError):
        ViTConfig(depth=3, ssvp_layer=3)
