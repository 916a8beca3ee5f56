"""Batch containers flowing through the encoders and the trainer."""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import Tensor


@dataclass(frozen=True)
class ImageBatch:
    """Pixels in [0, 1], shape [batch, channels, H, W].

    ``patch_mask`` ([batch, N_patches] bool) is set by ``masking.apply_mask``;
    the image encoder swaps masked patch embeddings for its mask embedding.
    """

    pixels: Tensor
    patch_mask: Tensor | None = None

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be [batch, channels, H, W], got {tuple(self.pixels.shape)}")

    @property
    def batch_size(self) -> int:
        return self.pixels.shape[0]

    def select(self, index: Tensor) -> ImageBatch:
        mask = None if self.patch_mask is None else self.patch_mask[index]
        return ImageBatch(self.pixels[index], mask)

    def to(self, dtype: torch.dtype) -> ImageBatch:
        return replace(self, pixels=self.pixels.to(dtype))


@dataclass(frozen=True)
class TextBatch:
    """Token ids [batch, seq_len] with a boolean attention mask (True = real token)."""

    token_ids: Tensor
    attention_mask: Tensor

    def __post_init__(self):
        if self.token_ids.ndim != 2 or self.token_ids.shape != self.attention_mask.shape:
            raise ValueError("token_ids and attention_mask must share a [batch, seq_len] shape")
        if self.attention_mask.dtype != torch.bool:
            object.__setattr__(self, "attention_mask", self.attention_mask.bool())

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]

    def select(self, index: Tensor) -> TextBatch:
        return TextBatch(self.token_ids[index], self.attention_mask[index])


@dataclass(frozen=True)
class PairBatch:
    images: ImageBatch
    texts: TextBatch
    match_labels: Tensor

    def __post_init__(self):
        n = self.images.batch_size
        if self.texts.batch_size != n or self.match_labels.shape != (n,):
            raise ValueError("images, texts and match_labels must share the batch dimension")

    @property
    def batch_size(self) -> int:
        return self.images.batch_size

    def select(self, index: Tensor) -> PairBatch:
        return PairBatch(self.images.select(index), self.texts.select(index), self.match_labels[index])
