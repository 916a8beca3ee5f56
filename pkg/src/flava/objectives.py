"""Pretraining losses: contrastive, ITM, MMM (multimodal), MIM and MLM (unimodal)."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .batches import PairBatch
from .encoders import ImageHiddenStates, MultimodalHiddenStates, TextHiddenStates
from .masking import MaskPlan


class MaskedPredictionHead(nn.Module):
    """dense -> GELU -> LayerNorm -> decoder over the target vocabulary."""

    def __init__(self, hidden: int, num_classes: int, eps: float = 1e-6):
        super().__init__()
        self.dense = nn.Linear(hidden, hidden)
        self.norm = nn.LayerNorm(hidden, eps=eps)
        self.decoder = nn.Linear(hidden, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        return self.decoder(self.norm(F.gelu(self.dense(x))))


@dataclass
class LossBundle:
    gc: Tensor | None = None
    mmm_image: Tensor | None = None
    mmm_text: Tensor | None = None
    itm: Tensor | None = None
    mim: Tensor | None = None
    mlm: Tensor | None = None

    def items(self) -> list[tuple[str, Tensor]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self) if getattr(self, f.name) is not None]

    def names(self) -> set[str]:
        return {name for name, _ in self.items()}

    def total(self, weights: dict[str, float] | None = None) -> Tensor:
        weights = weights or {}
        terms = [weights.get(name, 1.0) * value for name, value in self.items()]
        if not terms:
            raise ValueError("empty loss bundle")
        return torch.stack(terms).sum()

    def as_floats(self) -> dict[str, float]:
        return {name: float(value.detach()) for name, value in self.items()}


def contrastive_loss(img_emb: Tensor, txt_emb: Tensor, temperature: Tensor | float) -> tuple[Tensor, Tensor]:
    """Symmetric softmax contrastive loss over L2-normalized embeddings.

    Matched pairs sit on the diagonal. Returns ``(loss, logits)`` with
    ``logits[i, j] = <img_i, txt_j> / temperature``.
    """
    if img_emb.shape != txt_emb.shape or img_emb.ndim != 2:
        raise ValueError(f"embedding shapes differ: {tuple(img_emb.shape)} vs {tuple(txt_emb.shape)}")
    if img_emb.shape[0] < 1:
        raise ValueError("empty batch")
    if torch.any(img_emb.detach().norm(dim=-1) == 0) or torch.any(txt_emb.detach().norm(dim=-1) == 0):
        raise ValueError("zero-norm embedding has no direction")
    if not float(temperature.detach() if isinstance(temperature, Tensor) else temperature) > 0:
        raise ValueError("temperature must be positive")
    img = img_emb / img_emb.norm(dim=-1, keepdim=True)
    txt = txt_emb / txt_emb.norm(dim=-1, keepdim=True)
    logits = img @ txt.T / temperature
    target = torch.arange(logits.shape[0], device=logits.device)
    loss = 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))
    return loss, logits


def itm_loss(h_cls_m: Tensor, match_labels: Tensor, head: nn.Module) -> Tensor:
    """Binary cross-entropy of ``head`` (one logit per row) on the fused CLS state."""
    logits = head(h_cls_m).squeeze(-1)
    return F.binary_cross_entropy_with_logits(logits, match_labels.to(logits.dtype))


def _masked_ce(states: Tensor, offset: int, plan: MaskPlan, head: nn.Module) -> Tensor | None:
    """Cross-entropy over the plan's masked positions only (``None`` for an empty plan)."""
    if plan.labels is None:
        raise ValueError("mask plan has no labels")
    if plan.is_empty():
        return None
    if plan.mask.shape[0] != states.shape[0] or offset + plan.mask.shape[1] > states.shape[1]:
        raise ValueError(f"plan {plan.mask.shape} does not fit hidden states {tuple(states.shape)}")
    rows, cols = np.nonzero(plan.mask)
    picked = states[torch.from_numpy(rows), torch.from_numpy(cols + offset)]
    labels = torch.from_numpy(plan.labels[rows, cols]).to(states.device)
    return F.cross_entropy(head(picked), labels)


def mmm_loss(
    h_m: MultimodalHiddenStates,
    image_plan: MaskPlan,
    text_plan: MaskPlan,
    image_head: nn.Module,
    text_head: nn.Module,
) -> tuple[Tensor | None, Tensor | None]:
    """Masked multimodal modeling: predict codebook ids of masked patches and
    vocab ids of masked tokens from the fused states.

    Fused layout: [CLS_M] [CLS_I] patch_0..patch_{N-1} tok_0..tok_{L-1}, so
    patch p lives at 2 + p and token t at 1 + (1 + N) + t.
    """
    n_img = h_m.num_image_tokens
    if image_plan.mask.shape[1] != n_img - 1:
        raise ValueError(f"image plan covers {image_plan.mask.shape[1]} patches, states have {n_img - 1}")
    if text_plan.mask.shape[1] != h_m.h.shape[1] - 1 - n_img:
        raise ValueError("text plan length does not match fused states")
    image = _masked_ce(h_m.h, 2, image_plan, image_head)
    text = _masked_ce(h_m.h, 1 + n_img, text_plan, text_head)
    return image, text


def mim_loss(h_i: ImageHiddenStates, plan: MaskPlan, head: nn.Module) -> Tensor | None:
    if plan.mask.shape[1] != h_i.h.shape[1] - 1:
        raise ValueError("image plan length does not match encoder states")
    return _masked_ce(h_i.h, 1, plan, head)


def mlm_loss(h_t: TextHiddenStates, plan: MaskPlan, head: nn.Module) -> Tensor | None:
    if plan.mask.shape[1] != h_t.h.shape[1]:
        raise ValueError("text plan length does not match encoder states")
    return _masked_ce(h_t.h, 0, plan, head)


def itm_negative_indices(batch_size: int, neg_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Text source row for every pair and its match label.

    Each row becomes a negative with probability ``neg_fraction``; a negative
    takes the text of a uniformly chosen different row.
    """
    if not 0.0 <= neg_fraction <= 1.0:
        raise ValueError("neg_fraction must be in [0, 1]")
    if neg_fraction > 0 and batch_size < 2:
        raise ValueError("need at least 2 rows to build negatives")
    source = np.arange(batch_size)
    negative = rng.random(batch_size) < neg_fraction
    if batch_size >= 2:
        shift = rng.integers(1, batch_size, size=batch_size)
        source = np.where(negative, (source + shift) % batch_size, source)
    return source, ~negative


def make_itm_negatives(batch: PairBatch, neg_fraction: float, rng: np.random.Generator) -> PairBatch:
    source, labels = itm_negative_indices(batch.batch_size, neg_fraction, rng)
    texts = batch.texts.select(torch.from_numpy(source))
    return PairBatch(batch.images, texts, torch.from_numpy(labels))
