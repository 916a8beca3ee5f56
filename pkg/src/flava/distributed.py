"""Simulated data-parallel contrastive loss: global vs local back-propagation.

Each simulated worker owns a contiguous shard of the batch. A worker gathers
every shard's embeddings, computes the loss rows/columns for its own samples,
and back-propagates. In the *global* variant the gather is differentiable, so
a worker also produces gradients for other workers' embeddings, which are then
summed onto their owners (the reduce-scatter that backs a differentiable
all-gather). In the *local* variant gathered remote embeddings are constants
and each worker only gets gradients for its own shard.

Worker ``k``'s loss is normalised by the global batch size so that the worker
losses sum to the full-batch loss.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor


@dataclass(frozen=True)
class WorkerShard:
    worker_id: int
    image_emb: Tensor  # [B/K, D]
    text_emb: Tensor  # [B/K, D]


@dataclass
class ContrastiveGradients:
    loss: Tensor
    worker_losses: list[Tensor]
    image_grads: list[Tensor]  # one per worker, shaped like its shard
    text_grads: list[Tensor]

    def image_grad(self) -> Tensor:
        return torch.cat(self.image_grads)

    def text_grad(self) -> Tensor:
        return torch.cat(self.text_grads)


def shard_batch(image_emb: Tensor, text_emb: Tensor, num_workers: int) -> list[WorkerShard]:
    """Split a global batch into ``num_workers`` ordered shards."""
    b = image_emb.shape[0]
    if num_workers < 1:
        raise ValueError("need at least one worker")
    if b % num_workers:
        raise ValueError(f"batch {b} is not divisible by {num_workers} workers")
    size = b // num_workers
    return [
        WorkerShard(k, image_emb[k * size : (k + 1) * size], text_emb[k * size : (k + 1) * size])
        for k in range(num_workers)
    ]


def _check(shards: list[WorkerShard]) -> None:
    if not shards:
        raise ValueError("no shards")
    size, dim = shards[0].image_emb.shape
    for s in shards:
        if s.image_emb.shape != (size, dim) or s.text_emb.shape != (size, dim):
            raise ValueError("ragged shards: every worker needs the same [B/K, D] shard")


def _worker_backward(
    k: int, shards: list[WorkerShard], temperature: float, backprop_remote: bool, batch: int
) -> tuple[Tensor, list[Tensor | None], list[Tensor | None]]:
    imgs, txts = [], []
    for j, s in enumerate(shards):
        track = backprop_remote or j == k
        imgs.append(s.image_emb.detach().clone().requires_grad_(track))
        txts.append(s.text_emb.detach().clone().requires_grad_(track))
    img_all = F.normalize(torch.cat(imgs), dim=-1)
    txt_all = F.normalize(torch.cat(txts), dim=-1)
    size = shards[k].image_emb.shape[0]
    rows = torch.arange(k * size, (k + 1) * size)
    i2t = img_all[rows] @ txt_all.T / temperature
    t2i = txt_all[rows] @ img_all.T / temperature
    loss = 0.5 * (F.cross_entropy(i2t, rows, reduction="sum") + F.cross_entropy(t2i, rows, reduction="sum")) / batch
    leaves = [(i, t) for i, t in zip(imgs, txts)]
    wanted = [x for pair in leaves for x in pair if x.requires_grad]
    grads = iter(torch.autograd.grad(loss, wanted))
    img_grads: list[Tensor | None] = []
    txt_grads: list[Tensor | None] = []
    for i, t in leaves:
        img_grads.append(next(grads) if i.requires_grad else None)
        txt_grads.append(next(grads) if t.requires_grad else None)
    return loss.detach(), img_grads, txt_grads


def _run(shards: list[WorkerShard], temperature: float, backprop_remote: bool, parallel: bool) -> ContrastiveGradients:
    _check(shards)
    batch = sum(s.image_emb.shape[0] for s in shards)
    if parallel and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            results = list(
                pool.map(lambda k: _worker_backward(k, shards, temperature, backprop_remote, batch), range(len(shards)))
            )
    else:
        results = [_worker_backward(k, shards, temperature, backprop_remote, batch) for k in range(len(shards))]

    # reduce in a fixed worker order so the result does not depend on scheduling
    image_grads, text_grads = [], []
    for j, s in enumerate(shards):
        gi = torch.zeros_like(s.image_emb)
        gt = torch.zeros_like(s.text_emb)
        for _, img_g, txt_g in results:
            if img_g[j] is not None:
                gi = gi + img_g[j]
                gt = gt + txt_g[j]
        image_grads.append(gi)
        text_grads.append(gt)
    losses = [r[0] for r in results]
    total = losses[0]
    for value in losses[1:]:
        total = total + value
    return ContrastiveGradients(total, losses, image_grads, text_grads)


def global_contrastive(shards: list[WorkerShard], temperature: float, parallel: bool = False) -> ContrastiveGradients:
    """Contrastive loss with gradients back-propagated through the gather."""
    return _run(shards, temperature, backprop_remote=True, parallel=parallel)


def local_contrastive(shards: list[WorkerShard], temperature: float, parallel: bool = False) -> ContrastiveGradients:
    """Same forward pass; gradients reach only each worker's own embeddings."""
    return _run(shards, temperature, backprop_remote=False, parallel=parallel)


def full_batch_reference(image_emb: Tensor, text_emb: Tensor, temperature: float) -> tuple[Tensor, Tensor, Tensor]:
    """Loss and embedding gradients of the single-process loss over the whole batch."""
    from .objectives import contrastive_loss

    img = image_emb.detach().clone().requires_grad_(True)
    txt = text_emb.detach().clone().requires_grad_(True)
    loss, _ = contrastive_loss(img, txt, temperature)
    gi, gt = torch.autograd.grad(loss, (img, txt))
    return loss.detach(), gi, gt


def max_relative_error(a: Tensor, b: Tensor) -> float:
    """max |a - b| / max(|b|) over all entries."""
    scale = b.abs().max().clamp_min(1e-30)
    return float((a - b).abs().max() / scale)


def verify(num_workers: int, batch: int, dim: int = 16, temperature: float = 0.07, seed: int = 0) -> dict:
    """Compare both variants against the full-batch reference on random embeddings."""
    gen = torch.Generator().manual_seed(seed)
    img = torch.randn(batch, dim, generator=gen, dtype=torch.float64)
    txt = torch.randn(batch, dim, generator=gen, dtype=torch.float64)
    ref_loss, ref_gi, ref_gt = full_batch_reference(img, txt, temperature)
    shards = shard_batch(img, txt, num_workers)
    glob = global_contrastive(shards, temperature)
    loc = local_contrastive(shards, temperature)
    report = {
        "workers": num_workers,
        "batch": batch,
        "reference_loss": float(ref_loss),
        "global_loss": float(glob.loss),
        "local_loss": float(loc.loss),
        "global_max_rel_grad_error": max(
            max_relative_error(glob.image_grad(), ref_gi), max_relative_error(glob.text_grad(), ref_gt)
        ),
        "local_max_rel_grad_error": max(
            max_relative_error(loc.image_grad(), ref_gi), max_relative_error(loc.text_grad(), ref_gt)
        ),
        "local_vs_global_grad_norm": float(
            torch.sqrt(
                (loc.image_grad() - glob.image_grad()).pow(2).sum() + (loc.text_grad() - glob.text_grad()).pow(2).sum()
            )
        ),
    }
    report["loss_gap"] = abs(report["global_loss"] - report["local_loss"])
    report["global_pass"] = report["global_max_rel_grad_error"] <= 1e-6 and abs(
        report["global_loss"] - report["reference_loss"]
    ) <= 1e-10
    # with one worker there is nothing remote, so the variants must coincide
    differs = report["local_vs_global_grad_norm"] > 0 if num_workers > 1 else report["local_vs_global_grad_norm"] == 0
    report["local_pass"] = differs and report["loss_gap"] <= 1e-10
    return report
