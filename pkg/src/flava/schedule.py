"""Learning-rate schedule and optimizer construction."""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import OptimConfig


def lr_at(step: int, optim: OptimConfig) -> float:
    """Linear warmup from 0 to the peak rate, then cosine decay to 0 at ``total_updates``."""
    total, warmup, peak = optim.total_updates, optim.warmup_updates, optim.learning_rate
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak if step < total else 0.0
    progress = (step - warmup) / (total - warmup)
    if progress >= 1.0:
        return 0.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_optimizer(model: nn.Module, optim: OptimConfig) -> torch.optim.AdamW:
    """AdamW (decoupled weight decay). Biases, LayerNorm gains, learned tokens
    and the temperature are not decayed."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim < 2 or name.endswith(("cls_token", "mask_token", "pos_embed")) or "norm" in name:
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [
        {"params": decay, "weight_decay": optim.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=0.0, betas=(optim.beta1, optim.beta2), eps=optim.eps)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
