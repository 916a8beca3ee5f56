"""Mask plans: BEiT-style block masking for image patches, BERT-style token masking for text.

Image plans index patches (0..N-1); the CLS slot is not part of that index
space, so it can never be masked. Text plans index the token sequence, where
position 0 holds [CLS_T] and is excluded along with every special or padding
token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .batches import ImageBatch, TextBatch
from .config import MASK_ID, NUM_SPECIAL_TOKENS, SPECIAL_IDS


@dataclass(frozen=True, eq=False)
class MaskPlan:
    """Masked positions per row plus the ground-truth index at each of them.

    ``mask`` is bool [B, L]; ``labels`` is int64 [B, L], -1 off the mask. Image
    plans get their labels (codebook indices) attached with ``with_labels``.
    ``blocks`` records the rectangles an image plan was built from, per row.
    """

    mask: np.ndarray
    labels: np.ndarray | None = None
    kind: str = "text"
    blocks: tuple[tuple[tuple[int, int, int, int], ...], ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.mask.ndim != 2:
            raise ValueError("mask must be [batch, length]")
        if self.labels is not None:
            if self.labels.shape != self.mask.shape:
                raise ValueError("labels must match mask shape")
            if np.any((self.labels >= 0) != self.mask):
                raise ValueError("labels must be defined exactly on masked positions")

    @property
    def batch_size(self) -> int:
        return self.mask.shape[0]

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())

    def is_empty(self) -> bool:
        return not self.mask.any()

    def masked_positions(self, row: int = 0) -> list[int]:
        return np.flatnonzero(self.mask[row]).tolist()

    def with_labels(self, targets) -> MaskPlan:
        """Attach labels taken from ``targets`` ([B, L] indices) at masked positions."""
        targets = np.asarray(targets.cpu() if isinstance(targets, torch.Tensor) else targets)
        if targets.shape != self.mask.shape:
            raise ValueError(f"targets {targets.shape} do not match plan {self.mask.shape}")
        labels = np.where(self.mask, targets, -1).astype(np.int64)
        return replace(self, labels=labels)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "mask": self.mask.astype(int).tolist(),
            "labels": None if self.labels is None else self.labels.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> MaskPlan:
        labels = None if data["labels"] is None else np.asarray(data["labels"], dtype=np.int64)
        return cls(np.asarray(data["mask"], dtype=bool), labels, data["kind"])

    @staticmethod
    def stack(plans: list[MaskPlan]) -> MaskPlan:
        mask = np.concatenate([p.mask for p in plans])
        labels = None
        if all(p.labels is not None for p in plans):
            labels = np.concatenate([p.labels for p in plans])
        blocks = tuple(b for p in plans for b in p.blocks)
        return MaskPlan(mask, labels, plans[0].kind, blocks)


def block_mask(
    grid_h: int,
    grid_w: int,
    target_ratio: float,
    rng: np.random.Generator,
    min_block: int = 4,
    min_aspect: float = 0.3,
    max_attempts: int = 10,
) -> MaskPlan:
    """Union of random rectangles covering at least ``target_ratio`` of the grid.

    Blocks follow BEiT: area uniform in [min_block, remaining], log-uniform
    aspect ratio in [min_aspect, 1/min_aspect]. A block is accepted if it adds
    new patches without pushing the total past 1.5x the target; when no block
    fits after ``max_attempts`` tries, a single unmasked patch is added so the
    loop always terminates.
    """
    n = grid_h * grid_w
    mask = np.zeros((grid_h, grid_w), dtype=bool)
    blocks: list[tuple[int, int, int, int]] = []
    target = math.ceil(target_ratio * n - 1e-9) if target_ratio > 0 else 0
    target = min(target, n)
    ceiling = min(n, max(target, math.floor(1.5 * target)))
    log_aspect = (math.log(min_aspect), -math.log(min_aspect))

    while mask.sum() < target:
        count = int(mask.sum())
        remaining = target - count
        placed = False
        for _ in range(max_attempts):
            area = rng.uniform(min_block, max(min_block, remaining))
            aspect = math.exp(rng.uniform(*log_aspect))
            h = min(grid_h, max(1, int(round(math.sqrt(area * aspect)))))
            w = min(grid_w, max(1, int(round(math.sqrt(area / aspect)))))
            top = int(rng.integers(0, grid_h - h + 1))
            left = int(rng.integers(0, grid_w - w + 1))
            new = h * w - int(mask[top : top + h, left : left + w].sum())
            if 0 < new and count + new <= ceiling:
                mask[top : top + h, left : left + w] = True
                blocks.append((top, left, h, w))
                placed = True
                break
        if not placed:
            free = np.flatnonzero(~mask.ravel())
            p = int(free[rng.integers(0, len(free))])
            top, left = divmod(p, grid_w)
            mask[top, left] = True
            blocks.append((top, left, 1, 1))

    return MaskPlan(mask.reshape(1, n), None, "image", (tuple(blocks),))


def block_mask_batch(
    batch_size: int,
    grid: int,
    target_ratio: float,
    rng: np.random.Generator,
    min_block: int = 4,
    min_aspect: float = 0.3,
) -> MaskPlan:
    return MaskPlan.stack(
        [block_mask(grid, grid, target_ratio, rng, min_block, min_aspect) for _ in range(batch_size)]
    )


def maskable_positions(texts: TextBatch) -> np.ndarray:
    ids = texts.token_ids.cpu().numpy()
    attn = texts.attention_mask.cpu().numpy()
    return attn & ~np.isin(ids, SPECIAL_IDS)


def mlm_mask(texts: TextBatch, rate: float, rng: np.random.Generator) -> MaskPlan:
    """Mask each non-special, non-padding token independently with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    maskable = maskable_positions(texts)
    draws = rng.random(maskable.shape)
    mask = maskable & (draws < rate)
    ids = texts.token_ids.cpu().numpy()
    return MaskPlan(mask, np.where(mask, ids, -1).astype(np.int64), "text")


def apply_mask(
    batch,
    plan: MaskPlan,
    *,
    mask_token_id: int = MASK_ID,
    bert_split: bool = False,
    vocab_size: int | None = None,
    rng: np.random.Generator | None = None,
):
    """Return a copy of ``batch`` with the plan's positions masked.

    Text: masked ids become ``mask_token_id`` (or the 80/10/10 BERT split when
    ``bert_split`` is set). Images: the plan becomes the batch's ``patch_mask``
    and the encoder substitutes its learned mask embedding.
    """
    if isinstance(batch, ImageBatch):
        if plan.mask.shape[0] != batch.batch_size:
            raise ValueError("plan batch size does not match image batch")
        if plan.is_empty():
            return batch
        # the encoder checks the plan length against its patch grid
        return ImageBatch(batch.pixels, torch.from_numpy(plan.mask.copy()))

    if isinstance(batch, TextBatch):
        if plan.mask.shape != tuple(batch.token_ids.shape):
            raise ValueError(f"plan shape {plan.mask.shape} out of range for batch {tuple(batch.token_ids.shape)}")
        if plan.is_empty():
            return batch
        ids = batch.token_ids.clone()
        m = torch.from_numpy(plan.mask.copy()).to(ids.device)
        if not bert_split:
            ids[m] = mask_token_id
        else:
            if rng is None or vocab_size is None:
                raise ValueError("bert_split needs rng and vocab_size")
            u = torch.from_numpy(rng.random(plan.mask.shape))
            random_ids = torch.from_numpy(rng.integers(NUM_SPECIAL_TOKENS, vocab_size, plan.mask.shape))
            ids = torch.where(m & (u < 0.8), torch.full_like(ids, mask_token_id), ids)
            ids = torch.where(m & (u >= 0.8) & (u < 0.9), random_ids.to(ids.dtype), ids)
        return TextBatch(ids, batch.attention_mask)

    raise TypeError(f"cannot mask a {type(batch).__name__}")


def restore_tokens(masked: TextBatch, plan: MaskPlan) -> TextBatch:
    """Undo ``apply_mask`` on text using the plan's labels."""
    ids = masked.token_ids.clone()
    m = torch.from_numpy(plan.mask.copy())
    ids[m] = torch.from_numpy(plan.labels[plan.mask]).to(ids.dtype)
    return TextBatch(ids, masked.attention_mask)
