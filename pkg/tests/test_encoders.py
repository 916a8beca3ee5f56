import dataclasses
import math

import numpy as np
import pytest
import torch
from conftest import make_images, make_texts
from hypothesis import given, settings
from hypothesis import strategies as st

from flava.batches import ImageBatch, TextBatch
from flava.config import desk_config, paper_config
from flava.encoders import (
    Block,
    ImageEncoder,
    MultimodalEncoder,
    TextEncoder,
    patchify,
    resize_position_grid,
)
from flava.gradcheck import check_gradients


@pytest.mark.parametrize("size,patch,expected", [(224, 16, 196), (480, 16, 900), (32, 8, 16)])
def test_patch_counts(size, patch, expected):
    x = torch.zeros(1, 3, size, size)
    assert patchify(x, patch).shape == (1, expected, 3 * patch * patch)


def test_patchify_is_row_major():
    x = torch.arange(16.0).reshape(1, 1, 4, 4)
    patches = patchify(x, 2)
    assert patches[0, 0].tolist() == [0, 1, 4, 5]
    assert patches[0, 1].tolist() == [2, 3, 6, 7]
    assert patches[0, 2].tolist() == [8, 9, 12, 13]


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        patchify(torch.zeros(1, 3, 30, 32), 8)


def test_desk_shapes(model):
    h_i = model.image_encoder(make_images(2))
    h_t = model.text_encoder(make_texts(2, 8, 1000))
    h_m = model.multimodal_encoder(h_i, h_t)
    assert h_i.h.shape == (2, 17, 64)
    assert h_t.h.shape == (2, 8, 64)
    assert h_m.h.shape == (2, 26, 64)
    assert h_m.cls.shape == (2, 64)
    assert h_m.image_part.shape == (2, 17, 64)
    assert h_m.text_part.shape == (2, 8, 64)


@pytest.mark.slow
def test_paper_image_shape():
    enc = ImageEncoder(paper_config().model)
    with torch.no_grad():
        h = enc(torch.rand(1, 3, 224, 224))
    assert h.h.shape == (1, 197, 768)


def test_outputs_finite(model):
    h_i = model.image_encoder(make_images(3))
    h_t = model.text_encoder(make_texts(3, 8, 1000, pad=2))
    h_m = model.multimodal_encoder(h_i, h_t)
    for t in (h_i.h, h_t.h, h_m.h):
        assert torch.isfinite(t).all()


def test_zeroed_output_projections_stay_finite(model):
    with torch.no_grad():
        for block in model.image_encoder.transformer.blocks:
            block.attn.proj.weight.zero_()
            block.mlp.fc2.weight.zero_()
    h = model.image_encoder(make_images(2)).h
    assert torch.isfinite(h).all()


def test_padding_does_not_leak(model):
    short = make_texts(2, 6, 1000, seed=3)
    ids = torch.cat([short.token_ids, torch.zeros(2, 4, dtype=torch.long)], dim=1)
    mask = torch.cat([short.attention_mask, torch.zeros(2, 4, dtype=torch.bool)], dim=1)
    padded = TextBatch(ids, mask)
    a = model.text_encoder(short).h
    b = model.text_encoder(padded).h[:, :6]
    assert torch.allclose(a, b, atol=1e-6)


def test_padding_contents_do_not_matter(model):
    texts = make_texts(2, 10, 1000, seed=1, pad=3)
    other = texts.token_ids.clone()
    other[:, -3:] = 777
    a = model.text_encoder(texts).h[:, :7]
    b = model.text_encoder(TextBatch(other, texts.attention_mask)).h[:, :7]
    assert torch.allclose(a, b, atol=1e-6)


def test_out_of_range_token(model):
    texts = make_texts(1, 8, 1000)
    texts.token_ids[0, 3] = 1000
    with pytest.raises(ValueError, match="out of range"):
        model.text_encoder(texts)


def test_too_long_sequence(model):
    with pytest.raises(ValueError, match="max_text_len"):
        model.text_encoder(make_texts(1, 17, 1000))


def test_multimodal_batch_mismatch(model):
    h_i = model.image_encoder(make_images(2))
    h_t = model.text_encoder(make_texts(3, 8, 1000))
    with pytest.raises(ValueError, match="batch mismatch"):
        model.multimodal_encoder(h_i, h_t)


@settings(max_examples=10, deadline=None)
@given(st.permutations(list(range(4))))
def test_multimodal_batch_equivariance(perm):
    model = _shared_model()
    images, texts = make_images(4, seed=5), make_texts(4, 8, 1000, seed=5, pad=1)
    idx = torch.tensor(perm)
    out = model.multimodal_encoder(model.image_encoder(images), model.text_encoder(texts)).h
    permuted = model.multimodal_encoder(
        model.image_encoder(images.select(idx)), model.text_encoder(texts.select(idx))
    ).h
    assert torch.allclose(out[idx], permuted, atol=1e-6)


_MODEL = {}


def _shared_model():
    if "m" not in _MODEL:
        from flava.model import FlavaModel

        _MODEL["m"] = FlavaModel(desk_config().model).eval()
    return _MODEL["m"]


def test_fused_cls_depends_on_every_pixel_region(model64):
    images = make_images(1, seed=2, dtype=torch.float64)
    texts = make_texts(1, 8, 1000, seed=2)
    h_t = model64.text_encoder(texts)
    # a plain sum of a layer-normed vector is constant, so probe a random direction
    direction = torch.randn(64, generator=torch.Generator().manual_seed(0), dtype=torch.float64)

    def fused(pixels):
        return model64.multimodal_encoder(model64.image_encoder(ImageBatch(pixels)), h_t).cls[0] @ direction

    eps = 1e-5
    # one pixel in each of a few different patches
    for c, y, x in [(0, 0, 0), (1, 13, 21), (2, 31, 31), (0, 20, 4)]:
        plus, minus = images.pixels.clone(), images.pixels.clone()
        plus[0, c, y, x] += eps
        minus[0, c, y, x] -= eps
        with torch.no_grad():
            derivative = (fused(plus) - fused(minus)) / (2 * eps)
        assert abs(float(derivative)) > 1e-9


def test_every_block_is_live(model):
    images = make_images(2)
    full = model.image_encoder(images).h
    blocks = model.image_encoder.transformer.blocks
    last = blocks[-1]
    del blocks[-1]
    try:
        truncated = model.image_encoder(images).h
    finally:
        blocks.append(last)
    assert not torch.allclose(full, truncated, atol=1e-4)


def _layer_norm(x, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _gelu(x):
    from math import erf

    return np.vectorize(lambda v: 0.5 * v * (1 + erf(v / math.sqrt(2))))(x)


def test_block_matches_hand_computed_prenorm_forward():
    eps = 1e-6
    block = Block(dim=2, num_heads=1, intermediate=2, eps=eps).double()
    wqkv = np.array([[0.5, -0.2], [0.1, 0.3], [0.2, 0.4], [-0.3, 0.1], [0.7, 0.0], [0.0, -0.6]])
    bqkv = np.array([0.01, -0.02, 0.03, 0.0, 0.05, -0.01])
    wo, bo = np.array([[0.9, 0.1], [-0.2, 0.4]]), np.array([0.02, -0.03])
    w1, b1 = np.array([[0.3, -0.5], [0.8, 0.2]]), np.array([0.1, 0.0])
    w2, b2 = np.array([[-0.4, 0.6], [0.25, 0.35]]), np.array([0.0, 0.05])
    g1, be1 = np.array([1.2, 0.8]), np.array([0.1, -0.1])
    g2, be2 = np.array([0.9, 1.1]), np.array([0.0, 0.2])
    with torch.no_grad():
        for mod, w, b in [(block.attn.qkv, wqkv, bqkv), (block.attn.proj, wo, bo), (block.mlp.fc1, w1, b1), (block.mlp.fc2, w2, b2)]:
            mod.weight.copy_(torch.from_numpy(w))
            mod.bias.copy_(torch.from_numpy(b))
        block.norm1.weight.copy_(torch.from_numpy(g1))
        block.norm1.bias.copy_(torch.from_numpy(be1))
        block.norm2.weight.copy_(torch.from_numpy(g2))
        block.norm2.bias.copy_(torch.from_numpy(be2))

    x = np.array([[0.3, -1.2], [2.0, 0.5]])  # 2 tokens, 2 features

    n1 = _layer_norm(x, eps) * g1 + be1
    qkv = n1 @ wqkv.T + bqkv
    q, k, v = qkv[:, :2], qkv[:, 2:4], qkv[:, 4:]
    s = q @ k.T / math.sqrt(2)
    a = np.exp(s - s.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    x1 = x + (a @ v) @ wo.T + bo
    n2 = _layer_norm(x1, eps) * g2 + be2
    expected = x1 + _gelu(n2 @ w1.T + b1) @ w2.T + b2

    got = block(torch.from_numpy(x)[None])[0].detach().numpy()
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_position_interpolation_to_larger_input():
    cfg = dataclasses.replace(desk_config().model)
    enc = ImageEncoder(cfg)
    h = enc(torch.rand(1, 3, 64, 64))
    assert h.h.shape == (1, 1 + 64, 64)
    assert torch.isfinite(h.h).all()


def test_position_resize_keeps_cls_and_identity():
    pos = torch.randn(1, 1 + 16, 8)
    same = resize_position_grid(pos, 4)
    assert torch.equal(same, pos)
    bigger = resize_position_grid(pos, 30)
    assert bigger.shape == (1, 901, 8)
    assert torch.equal(bigger[:, 0], pos[:, 0])


def test_paper_positions_interpolate_to_480():
    pos = torch.randn(1, 197, 4)
    assert resize_position_grid(pos, 480 // 16).shape == (1, 901, 4)


def test_mask_token_replaces_patch_embedding(model):
    images = make_images(2)
    mask = torch.zeros(2, 16, dtype=torch.bool)
    mask[0, 5] = True
    emb = model.image_encoder.patch_embeddings(ImageBatch(images.pixels, mask))
    assert torch.equal(emb[0, 5], model.image_encoder.mask_token[0, 0])
    plain = model.image_encoder.patch_embeddings(images)
    assert torch.equal(emb[1], plain[1])
    assert torch.equal(emb[0, :5], plain[0, :5])


@pytest.mark.parametrize("part", ["image", "text", "multimodal"])
def test_encoder_gradients_match_finite_differences(model64, part):
    images = make_images(2, seed=4, dtype=torch.float64)
    texts = make_texts(2, 8, 1000, seed=4, pad=2)
    m = model64

    def loss():
        h_i = m.image_encoder(images)
        h_t = m.text_encoder(texts)
        if part == "image":
            return (h_i.h**2).mean()
        if part == "text":
            return (h_t.h[h_t.attention_mask] ** 2).mean()
        return (m.multimodal_encoder(h_i, h_t).cls ** 2).mean()

    encoder = {"image": m.image_encoder, "text": m.text_encoder, "multimodal": m.multimodal_encoder}[part]
    report = check_gradients(loss, list(encoder.parameters()), coords_per_tensor=1, num_directions=2)
    assert report["max_rel_error"] < 1e-4


def test_same_seed_same_init():
    cfg = desk_config().model
    a = TextEncoder(cfg)
    from flava.model import FlavaModel

    m1, m2 = FlavaModel(cfg), FlavaModel(cfg)
    for (n1, p1), (_, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert torch.equal(p1, p2), n1
    m3 = FlavaModel(dataclasses.replace(cfg, seed=1))
    assert not torch.equal(m1.image_encoder.patch_embed.weight, m3.image_encoder.patch_embed.weight)
    assert a.token_embed.weight.shape == (1000, 64)


def test_multimodal_has_no_positional_table():
    enc = MultimodalEncoder(desk_config().model)
    assert not any("pos" in name for name, _ in enc.named_parameters())
