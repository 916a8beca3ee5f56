"""Pre-norm ViT-style encoders: image, text, and the multimodal fusion encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .batches import ImageBatch, TextBatch
from .config import ModelConfig


def patchify(pixels: Tensor, patch_size: int) -> Tensor:
    """[B, C, H, W] -> [B, N, C * p * p] with patches in row-major order."""
    if isinstance(pixels, ImageBatch):
        pixels = pixels.pixels
    b, c, h, w = pixels.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = pixels.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch_size * patch_size)


def resize_position_grid(pos: Tensor, new_grid: int) -> Tensor:
    """Bicubically resample a [1, 1 + g*g, D] positional table to a new grid size.

    The CLS position is kept as is.
    """
    cls_pos, grid_pos = pos[:, :1], pos[:, 1:]
    old = int(round(math.sqrt(grid_pos.shape[1])))
    if old == new_grid:
        return pos
    d = grid_pos.shape[-1]
    grid = grid_pos.reshape(1, old, old, d).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=(new_grid, new_grid), mode="bicubic", align_corners=False)
    grid = grid.permute(0, 2, 3, 1).reshape(1, new_grid * new_grid, d)
    return torch.cat([cls_pos, grid], dim=1)


@dataclass
class ImageHiddenStates:
    h: Tensor  # [B, 1 + N, D]

    @property
    def cls(self) -> Tensor:
        return self.h[:, 0]


@dataclass
class TextHiddenStates:
    h: Tensor  # [B, L, D]
    attention_mask: Tensor

    @property
    def cls(self) -> Tensor:
        return self.h[:, 0]

    def select(self, index: Tensor) -> TextHiddenStates:
        return TextHiddenStates(self.h[index], self.attention_mask[index])


@dataclass
class MultimodalHiddenStates:
    h: Tensor  # [B, 1 + (1 + N) + L, D]
    num_image_tokens: int  # 1 + N

    @property
    def cls(self) -> Tensor:
        return self.h[:, 0]

    @property
    def image_part(self) -> Tensor:
        return self.h[:, 1 : 1 + self.num_image_tokens]

    @property
    def text_part(self) -> Tensor:
        return self.h[:, 1 + self.num_image_tokens :]


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, key_mask: Tensor | None = None) -> Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: LN before attention and before the MLP."""

    def __init__(self, dim: int, num_heads: int, intermediate: int, eps: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=eps)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=eps)
        self.mlp = MLP(dim, intermediate)

    def forward(self, x: Tensor, key_mask: Tensor | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.mlp(self.norm2(x))


class Transformer(nn.Module):
    def __init__(self, config: ModelConfig, num_layers: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            Block(config.hidden_size, config.num_heads, config.intermediate_size, config.layer_norm_eps)
            for _ in range(num_layers)
        )
        self.norm = nn.LayerNorm(config.hidden_size, eps=config.layer_norm_eps)

    def forward(self, x: Tensor, key_mask: Tensor | None = None) -> Tensor:
        for block in self.blocks:
            x = block(x, key_mask)
        return self.norm(x)


class ImageEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.hidden_size
        self.patch_embed = nn.Linear(config.patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + config.num_patches, d))
        self.transformer = Transformer(config, config.image_layers)

    def patch_embeddings(self, images: ImageBatch) -> Tensor:
        """Patch embeddings before positions are added, mask embedding swapped in."""
        pixels = (images.pixels - self.config.pixel_mean) / self.config.pixel_std
        x = self.patch_embed(patchify(pixels, self.config.patch_size))
        if images.patch_mask is not None:
            m = images.patch_mask.to(x.device)
            if m.shape != x.shape[:2]:
                raise ValueError(f"patch mask {tuple(m.shape)} does not match {tuple(x.shape[:2])} patches")
            x = torch.where(m[..., None], self.mask_token.to(x.dtype).expand_as(x), x)
        return x

    def forward(self, images: ImageBatch | Tensor) -> ImageHiddenStates:
        if isinstance(images, Tensor):
            images = ImageBatch(images)
        x = self.patch_embeddings(images)
        b, n, _ = x.shape
        pos = self.pos_embed
        if pos.shape[1] != n + 1:
            grid = int(round(math.sqrt(n)))
            if grid * grid != n:
                raise ValueError("only square images can use interpolated positions")
            pos = resize_position_grid(pos, grid)
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1) + pos
        return ImageHiddenStates(self.transformer(x))


class TextEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.hidden_size
        self.token_embed = nn.Embedding(config.text_vocab_size, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.max_text_len, d))
        self.transformer = Transformer(config, config.text_layers)

    def forward(self, texts: TextBatch) -> TextHiddenStates:
        ids = texts.token_ids
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.text_vocab_size):
            raise ValueError(f"token id out of range [0, {self.config.text_vocab_size})")
        if ids.shape[1] > self.config.max_text_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_text_len {self.config.max_text_len}")
        x = self.token_embed(ids) + self.pos_embed[:, : ids.shape[1]]
        return TextHiddenStates(self.transformer(x, texts.attention_mask), texts.attention_mask)


class MultimodalEncoder(nn.Module):
    """Fuses [CLS_M] ++ proj(h_I) ++ proj(h_T) with full self-attention.

    No positional embeddings of its own; the projected states carry them.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.hidden_size
        self.image_proj = nn.Linear(d, d)
        self.text_proj = nn.Linear(d, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.transformer = Transformer(config, config.multimodal_layers)

    def forward(self, image: ImageHiddenStates, text: TextHiddenStates) -> MultimodalHiddenStates:
        hi, ht = image.h, text.h
        if hi.shape[0] != ht.shape[0]:
            raise ValueError(f"batch mismatch: {hi.shape[0]} images vs {ht.shape[0]} texts")
        b = hi.shape[0]
        x = torch.cat([self.cls_token.expand(b, -1, -1), self.image_proj(hi), self.text_proj(ht)], dim=1)
        ones = torch.ones(b, 1 + hi.shape[1], dtype=torch.bool, device=hi.device)
        key_mask = torch.cat([ones, text.attention_mask.to(hi.device)], dim=1)
        return MultimodalHiddenStates(self.transformer(x, key_mask), hi.shape[1])


def init_weights(module: nn.Module, std: float, generator: torch.Generator) -> None:
    """Truncated normal (std) for weights and learned tokens, zeros for biases, unit LayerNorm."""
    for sub in module.modules():
        if isinstance(sub, nn.LayerNorm):
            nn.init.ones_(sub.weight)
            nn.init.zeros_(sub.bias)
        elif isinstance(sub, (nn.Linear, nn.Embedding)):
            nn.init.trunc_normal_(sub.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
            if getattr(sub, "bias", None) is not None:
                nn.init.zeros_(sub.bias)
        for name, p in sub.named_parameters(recurse=False):
            if name in ("cls_token", "mask_token", "pos_embed"):
                nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std, generator=generator)


def seeded_generator(seed: int, stream: int) -> torch.Generator:
    """A torch generator for one named parameter group, independent of the others."""
    value = int(np.random.SeedSequence([seed, stream]).generate_state(1, dtype=np.uint64)[0])
    return torch.Generator().manual_seed(value % (2**63))
