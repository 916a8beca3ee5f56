import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flava.tokenizer import (
    Codebook,
    InsufficientDataError,
    fit_codebook,
    patch_features,
    quantize,
    tokenize,
)


def test_n_equals_k_gives_zero_error(rng):
    x = rng.normal(size=(12, 5))
    cb = fit_codebook(x, 12, rng)
    assert cb.history[-1] == pytest.approx(0.0, abs=1e-20)
    assert sorted(quantize(x, cb.entries).tolist()) == list(range(12))


def test_two_gaussian_clusters(rng):
    a = rng.normal(loc=(-5.0, 0.0), scale=0.5, size=(200, 2))
    b = rng.normal(loc=(5.0, 1.0), scale=0.5, size=(300, 2))
    cb = fit_codebook(np.concatenate([a, b]), 2, rng)
    centers = cb.entries[np.argsort(cb.entries[:, 0])]
    np.testing.assert_allclose(centers[0], a.mean(0), atol=0.1)
    np.testing.assert_allclose(centers[1], b.mean(0), atol=0.1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 10))
def test_error_history_non_increasing(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(60, 3))
    cb = fit_codebook(x, k, rng)
    h = np.array(cb.history)
    assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))


def test_insufficient_data(rng):
    with pytest.raises(InsufficientDataError):
        fit_codebook(rng.normal(size=(3, 2)), 4, rng)
    with pytest.raises(InsufficientDataError):
        fit_codebook(np.zeros((10, 2)), 2, rng)


def test_nearest_entry_and_tie_rule():
    entries = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert quantize(np.array([[0.9, 0.9]]), entries).tolist() == [1]
    entries = np.zeros((8, 1))
    entries[:, 0] = np.arange(8) * 10.0
    entries[3, 0], entries[7, 0] = -1.0, 1.0
    # 0.0 sits exactly between entries 3 (-1) and 7 (+1); entry 0 is at 0 so move it away
    entries[0, 0] = 100.0
    assert quantize(np.array([[0.0]]), entries).tolist() == [3]


def test_codebook_entries_quantize_to_themselves(rng):
    cb = fit_codebook(rng.normal(size=(200, 4)), 16, rng)
    assert quantize(cb.entries, cb.entries).tolist() == list(range(16))


def test_tokenize_range_and_shape(rng):
    images = torch.rand(4, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    cb = fit_codebook(patch_features(images, 8), 32, rng, patch_size=8)
    codes = tokenize(images, cb)
    assert codes.shape == (4, 16)
    assert codes.dtype == torch.int64
    assert int(codes.min()) >= 0 and int(codes.max()) < 32


def test_tokenize_is_permutation_equivariant_over_patches(rng):
    images = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    cb = fit_codebook(patch_features(images, 8), 8, rng, patch_size=8)
    codes = tokenize(images, cb)
    # swap two 8x8 patches in the pixel grid, the codes swap with them
    swapped = images.clone()
    swapped[:, :, 0:8, 0:8], swapped[:, :, 8:16, 24:32] = images[:, :, 8:16, 24:32], images[:, :, 0:8, 0:8]
    codes2 = tokenize(swapped, cb)
    assert torch.equal(codes2[:, 0], codes[:, 7]) and torch.equal(codes2[:, 7], codes[:, 0])
    assert torch.equal(tokenize(images, cb), codes)


def test_dimension_mismatch(rng):
    cb = Codebook(rng.normal(size=(4, 10)), patch_size=8)
    with pytest.raises(ValueError, match="does not match"):
        tokenize(torch.rand(1, 3, 32, 32), cb)


def test_codebook_invariants(rng):
    with pytest.raises(ValueError):
        Codebook(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        Codebook(np.zeros((2, 3)))


def test_beats_random_assignment(rng):
    train = torch.rand(64, 3, 32, 32, generator=torch.Generator().manual_seed(2))
    cb = fit_codebook(patch_features(train, 8), 32, rng, patch_size=8)
    gen = torch.Generator().manual_seed(3)
    for _ in range(100):
        img = torch.rand(1, 3, 32, 32, generator=gen)
        feats = patch_features(img, 8)
        nearest = cb.entries[tokenize(img, cb)[0].numpy()]
        random = cb.entries[rng.integers(0, 32, len(feats))]
        assert ((feats - nearest) ** 2).sum() <= ((feats - random) ** 2).sum()


def test_save_load_round_trip(tmp_path, rng):
    cb = fit_codebook(rng.normal(size=(50, 3)), 5, rng, patch_size=2)
    cb.save(tmp_path / "cb.npz")
    back = Codebook.load(tmp_path / "cb.npz")
    assert np.array_equal(back.entries, cb.entries)
    assert back.patch_size == 2
    assert back.history == cb.history


def test_fit_is_deterministic():
    x = np.random.default_rng(0).normal(size=(100, 3))
    a = fit_codebook(x, 6, np.random.default_rng(5))
    b = fit_codebook(x, 6, np.random.default_rng(5))
    assert np.array_equal(a.entries, b.entries)
