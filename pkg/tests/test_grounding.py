import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from soundpatch.config import DataConfig, EncoderConfig
from soundpatch.encoders import PatchEncoder, image_to_tensor
from soundpatch.grounding import (AttentionMap, DegenerateMaskWarning,
                                  GroundingModel, combine_masks, heatmap_png,
                                  rescale_mask, upsample_bilinear)


@pytest.fixture()
def model():
    torch.manual_seed(0)
    return GroundingModel(EncoderConfig(), n_patches=16)


def test_rescale_worked_example():
    out = rescale_mask(np.array([1.0, 0, 0, 0]),
                       np.array([0.7, 0.1, 0.1, 0.1]))
    assert out.kind == "rescaled_mask"
    assert np.allclose(out.weights, [0.7, 0.1, 0.1, 0.1], atol=1e-12)


def test_rescale_identity():
    ref = np.array([0.5, 0.3, 0.1, 0.1])
    out = rescale_mask(ref.copy(), ref)
    assert np.allclose(out.weights, ref, atol=1e-12)


def test_rescale_degenerate_reference_gives_uniform():
    with pytest.warns(DegenerateMaskWarning):
        out = rescale_mask(np.array([1.0, 1, 0, 0]), np.full(4, 0.25))
    assert np.allclose(out.weights, 0.25)


def test_rescale_degenerate_mask_gives_uniform():
    with pytest.warns(DegenerateMaskWarning):
        out = rescale_mask(np.full(4, 0.25), np.array([0.7, 0.1, 0.1, 0.1]))
    assert np.allclose(out.weights, 0.25)


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=10 ** 6))
def test_rescale_moment_matching_exact(seed):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(2, 33))
    raw = rng.uniform(0, 1, p)
    ref = rng.dirichlet(np.ones(p))
    if raw.std() < 1e-9 or ref.std() < 1e-9:
        return
    out = rescale_mask(raw, ref).weights
    assert abs(out.mean() - ref.mean()) < 1e-9
    assert abs(out.std() - ref.std()) < 1e-9
    assert abs(out.sum() - 1.0) < 1e-6   # any attention reference has mean 1/P


def test_rescale_shape_mismatch():
    with pytest.raises(ValueError):
        rescale_mask(np.ones(4), np.ones(5) / 5)


def test_projection_shapes_and_zero_weights(model):
    e_t = torch.randn(2, 64)
    e_v = torch.randn(2, 16, 64)
    q, k, v = model.project(e_t, e_v)
    assert q.shape == (2, 1, 64) and k.shape == (2, 16, 64) and v.shape == (2, 16, 64)
    with torch.no_grad():
        model.w_q.weight.zero_()
        model.w_k.weight.zero_()
        model.w_v.weight.zero_()
    q, k, v = model.project(e_t, e_v)
    assert torch.all(q == 0)
    assert torch.allclose(k, model.pos_k.expand(2, -1, -1))
    assert torch.allclose(v, model.pos_v.expand(2, -1, -1))


def test_identical_patches_identical_keys_without_pe():
    torch.manual_seed(1)
    cfg = EncoderConfig()
    model = GroundingModel(cfg, 16, use_positional_encoding=False)
    enc = PatchEncoder(cfg, DataConfig())
    image = np.full((64, 64, 3), 0.3, dtype=np.float32)   # every patch equal
    e_v = enc(image_to_tensor(image).unsqueeze(0))
    _, k, _ = model.project(torch.randn(1, 64), e_v)
    assert torch.allclose(k[0, 0], k[0, 7], atol=1e-6)
    model_pe = GroundingModel(cfg, 16, use_positional_encoding=True)
    _, k2, _ = model_pe.project(torch.randn(1, 64), e_v)
    assert not torch.allclose(k2[0, 0], k2[0, 7], atol=1e-6)


def test_uniform_attention_for_identical_keys(model):
    q = torch.randn(1, 1, 64)
    k = torch.randn(1, 1, 64).expand(1, 16, 64)
    w = model.attention_weights(q, k)
    assert torch.allclose(w, torch.full((1, 16), 1 / 16), atol=1e-6)


def test_large_margin_concentrates(model):
    q = torch.zeros(1, 1, 64)
    q[0, 0, 0] = 8.0   # scaled by 1/sqrt(64) -> logit margin 20 vs 0
    k = torch.zeros(1, 16, 64)
    k[0, 3, 0] = 20.0
    w = model.attention_weights(q, k)
    assert w[0, 3] > 0.999


def test_weights_sum_to_one_all_variants():
    torch.manual_seed(2)
    cfg = EncoderConfig()
    e_t, e_v = torch.randn(3, 64), torch.randn(3, 16, 64)
    for variant in ("dot_product_single", "dot_product_multihead", "additive"):
        m = GroundingModel(cfg, 16, variant=variant)
        q, k, _ = m.project(e_t, e_v)
        w = m.attention_weights(q, k)
        assert torch.allclose(w.sum(dim=-1), torch.ones(3), atol=1e-6)
        if variant == "dot_product_multihead":
            hw = m.head_weights(q, k)
            assert hw.shape == (3, 4, 16)
            assert torch.allclose(hw.sum(dim=-1), torch.ones(3, 4), atol=1e-6)
            assert torch.allclose(torch.softmax(m._head_logits(q, k).mean(1), -1),
                                  m.attention_weights(q, k))


def test_unknown_variant():
    with pytest.raises(ValueError):
        GroundingModel(EncoderConfig(), 16, variant="bilinear")


def test_fuse_one_hot_reads_single_value_row(model):
    v = torch.randn(1, 16, 64)
    w = torch.zeros(1, 16)
    w[0, 5] = 1.0
    fused = model.fuse(w, v)
    direct = model.mlp(v[0, 5].unsqueeze(0))
    assert torch.allclose(fused, direct, atol=1e-6)


def test_fuse_linearity_pre_mlp():
    v = torch.randn(1, 16, 64)
    w1 = torch.zeros(1, 16)
    w2 = torch.zeros(1, 16)
    w1[0, 2] = 1.0
    w2[0, 9] = 1.0
    combined = 0.3 * w1 + 0.7 * w2
    readout = (combined.unsqueeze(1) @ v).squeeze(1)
    expected = 0.3 * v[0, 2] + 0.7 * v[0, 9]
    assert torch.allclose(readout[0], expected, atol=1e-6)


def test_fuse_deterministic(model):
    v = torch.randn(1, 16, 64)
    w = torch.softmax(torch.randn(1, 16), dim=-1)
    assert torch.equal(model.fuse(w, v), model.fuse(w, v))


def test_combine_masks_extent_weighted():
    masks = np.array([[1.0, 0, 0, 0], [0, 0.5, 0.5, 0]])
    out = combine_masks(masks, np.array([1.0, 2.0]))
    assert abs(out.sum() - 1.0) < 1e-12
    assert out[0] == pytest.approx(1 / 3)
    assert out[1] == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        combine_masks(np.zeros((1, 4)), np.array([0.0]))


def test_heatmap_png_resolution():
    png = heatmap_png(np.random.default_rng(0).dirichlet(np.ones(16)), 4, 64)
    from PIL import Image
    img = Image.open(io.BytesIO(png))
    assert img.size == (64, 64)


def test_upsample_bilinear_preserves_constant():
    up = upsample_bilinear(np.full(16, 1 / 16), 4, 64)
    assert np.allclose(up, 1 / 16, atol=1e-7)
