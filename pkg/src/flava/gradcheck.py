"""Central finite-difference checks of autograd gradients (use float64 models)."""

from __future__ import annotations

from typing import Callable, Sequence

import torch
from torch import Tensor


def _rel(a: float, b: float) -> float:
    denom = max(abs(a), abs(b))
    return 0.0 if denom == 0 else abs(a - b) / denom


@torch.no_grad()
def _central(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], deltas: Sequence[Tensor], step: float) -> float:
    for t, d in zip(tensors, deltas):
        t.add_(d, alpha=step)
    plus = float(loss_fn())
    for t, d in zip(tensors, deltas):
        t.add_(d, alpha=-2 * step)
    minus = float(loss_fn())
    for t, d in zip(tensors, deltas):
        t.add_(d, alpha=step)
    return (plus - minus) / (2 * step)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    coords_per_tensor: int = 2,
    num_directions: int = 3,
    step: float = 1e-5,
    seed: int = 0,
) -> dict[str, float]:
    """Compare autograd against central differences.

    Probes the ``coords_per_tensor`` largest-magnitude gradient entries of each
    tensor and ``num_directions`` random directions through all of ``params``
    jointly (directional derivative vs ``<grad, v>``). ``loss_fn`` must be
    deterministic. Returns the max relative error and the number of probes.
    """
    params = [p for p in params if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    errors = []

    for p, g in zip(params, grads):
        flat = g.reshape(-1).abs()
        if float(flat.max()) == 0:
            continue
        for i in torch.topk(flat, min(coords_per_tensor, flat.numel())).indices.tolist():
            delta = torch.zeros_like(p).reshape(-1)
            delta[i] = 1.0
            numeric = _central(loss_fn, [p], [delta.reshape(p.shape)], step)
            errors.append(_rel(float(g.reshape(-1)[i]), numeric))

    gen = torch.Generator().manual_seed(seed)
    for _ in range(num_directions):
        deltas = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        analytic = float(sum((g * d).sum() for g, d in zip(grads, deltas)))
        numeric = _central(loss_fn, params, deltas, step)
        errors.append(_rel(analytic, numeric))

    return {"max_rel_error": max(errors) if errors else 0.0, "probes": len(errors)}
