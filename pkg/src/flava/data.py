"""In-memory datasets (``.npz``) and synthetic fixtures for desk-scale runs.

Dataset files hold some of these arrays:

  pixels          float32 [N, C, H, W] in [0, 1]
  token_ids       int64   [N, L]
  attention_mask  bool    [N, L]
  labels          int64   [N]        (classification fixtures only)

A pair dataset has all of pixels/token_ids/attention_mask, row i of each
belonging together.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .batches import ImageBatch, PairBatch, TextBatch
from .config import CLS_ID, NUM_SPECIAL_TOKENS, PAD_ID, SEP_ID, ModelConfig

PALETTE = np.array(
    [[0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.15, 0.25, 0.9], [0.95, 0.85, 0.1], [0.6, 0.2, 0.8], [0.1, 0.8, 0.85]]
)


@dataclass
class ArrayDataset:
    pixels: np.ndarray | None = None
    token_ids: np.ndarray | None = None
    attention_mask: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        for a in (self.pixels, self.token_ids, self.labels):
            if a is not None:
                return len(a)
        return 0

    def images(self, index=None) -> ImageBatch:
        px = self.pixels if index is None else self.pixels[index]
        return ImageBatch(torch.from_numpy(np.ascontiguousarray(px, dtype=np.float32)))

    def texts(self, index=None) -> TextBatch:
        ids = self.token_ids if index is None else self.token_ids[index]
        am = self.attention_mask if index is None else self.attention_mask[index]
        return TextBatch(torch.from_numpy(np.asarray(ids, dtype=np.int64)), torch.from_numpy(np.asarray(am, dtype=bool)))

    def pairs(self, index=None) -> PairBatch:
        images, texts = self.images(index), self.texts(index)
        return PairBatch(images, texts, torch.ones(images.batch_size, dtype=torch.bool))

    def batch(self, kind: str, index):
        if kind == "multimodal_pairs":
            return self.pairs(index)
        if kind == "unimodal_images":
            return self.images(index)
        if kind == "unimodal_text":
            return self.texts(index)
        raise ValueError(f"unknown dataset kind {kind!r}")

    def save(self, path: str | Path) -> None:
        arrays = {k: v for k, v in vars(self).items() if v is not None}
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> ArrayDataset:
        with np.load(path, allow_pickle=False) as data:
            return cls(**{k: data[k] for k in data.files})


def _render(codes: np.ndarray, config: ModelConfig, rng: np.random.Generator, noise: float) -> np.ndarray:
    """Images whose regions are coloured by attribute values.

    The image is cut into a 2 x (A/2) grid of regions (a single row when A is
    odd), region a taking the palette colour of attribute a.
    """
    n, a = codes.shape
    s, c = config.image_size, config.num_channels
    rows = 2 if a % 2 == 0 and a > 1 else 1
    cols = a // rows
    img = np.empty((n, s, s, 3))
    for r in range(rows):
        for q in range(cols):
            ys = slice(r * s // rows, (r + 1) * s // rows)
            xs = slice(q * s // cols, (q + 1) * s // cols)
            img[:, ys, xs] = PALETTE[codes[:, r * cols + q]][:, None, None, :]
    img = img[..., :c] if c <= 3 else np.concatenate([img, img[..., : c - 3]], axis=-1)
    img = img + rng.uniform(-noise, noise, img.shape)
    return np.clip(img, 0.0, 1.0).transpose(0, 3, 1, 2).astype(np.float32)


def _attribute_tokens(codes: np.ndarray, num_values: int, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    n, a = codes.shape
    ids = np.full((n, seq_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((n, seq_len), dtype=bool)
    ids[:, 0] = CLS_ID
    ids[:, 1 : 1 + a] = NUM_SPECIAL_TOKENS + np.arange(a) * num_values + codes
    ids[:, 1 + a] = SEP_ID
    mask[:, : 2 + a] = True
    return ids, mask


def attribute_codes(n: int, num_attributes: int, num_values: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` attribute tuples, distinct whenever ``n`` does not exceed the number of combinations."""
    total = num_values**num_attributes
    if n > total:
        return rng.integers(0, num_values, (n, num_attributes))
    chosen: dict[tuple, None] = {}
    while len(chosen) < n:
        chosen.setdefault(tuple(rng.integers(0, num_values, num_attributes).tolist()), None)
    return np.array(list(chosen))


def make_pair_corpus(
    n: int,
    config: ModelConfig,
    rng: np.random.Generator,
    num_attributes: int = 4,
    num_values: int = 6,
    seq_len: int = 8,
    noise: float = 0.15,
) -> ArrayDataset:
    """Image-text pairs sharing latent attributes: image regions are coloured by
    attribute value and the caption names each value with a dedicated token."""
    codes = attribute_codes(n, num_attributes, num_values, rng)
    ids, mask = _attribute_tokens(codes, num_values, seq_len)
    return ArrayDataset(_render(codes, config, rng, noise), ids, mask)


def make_image_corpus(n: int, config: ModelConfig, rng: np.random.Generator, noise: float = 0.15) -> ArrayDataset:
    codes = attribute_codes(n, 4, len(PALETTE), rng)
    return ArrayDataset(pixels=_render(codes, config, rng, noise))


def make_text_corpus(n: int, config: ModelConfig, rng: np.random.Generator, seq_len: int = 8) -> ArrayDataset:
    ids = np.full((n, seq_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((n, seq_len), dtype=bool)
    lengths = rng.integers(3, seq_len - 1, n)
    for i, length in enumerate(lengths):
        ids[i, 0] = CLS_ID
        ids[i, 1 : 1 + length] = rng.integers(NUM_SPECIAL_TOKENS, config.text_vocab_size, length)
        ids[i, 1 + length] = SEP_ID
        mask[i, : 2 + length] = True
    return ArrayDataset(token_ids=ids, attention_mask=mask)


def make_classification_pairs(
    n: int, config: ModelConfig, rng: np.random.Generator, seq_len: int = 8, noise: float = 0.15
) -> ArrayDataset:
    """Two-class pairs: class 1 images are bright, class 0 dark, and each
    caption carries a class-specific token among random words."""
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    s, c = config.image_size, config.num_channels
    base = np.where(labels[:, None, None, None] == 1, 0.75, 0.25)
    pixels = np.clip(base + rng.uniform(-noise, noise, (n, c, s, s)), 0, 1).astype(np.float32)
    ids = rng.integers(NUM_SPECIAL_TOKENS + 2, config.text_vocab_size, (n, seq_len))
    ids[:, 0] = CLS_ID
    ids[:, 1] = NUM_SPECIAL_TOKENS + labels
    ids[:, -1] = SEP_ID
    mask = np.ones((n, seq_len), dtype=bool)
    return ArrayDataset(pixels, ids, mask, labels.astype(np.int64))


def write_desk_corpus(out_dir: str | Path, config: ModelConfig, seed: int = 0, n: int = 64) -> dict[str, Path]:
    """Write the pair / image / text fixtures used for desk-scale pretraining."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = {"pairs": out / "pairs.npz", "images": out / "images.npz", "texts": out / "texts.npz"}
    make_pair_corpus(n, config, rng).save(paths["pairs"])
    make_image_corpus(n, config, rng).save(paths["images"])
    make_text_corpus(n, config, rng).save(paths["texts"])
    return paths
