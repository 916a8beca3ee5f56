"""Discrete visual tokenizer: a k-means codebook over raw pixel patches.

Stands in for a frozen pretrained dVAE. Targets depend only on pixels, never
on the model being trained, and ``tokenize`` has the same contract a real
dVAE encoder would: images in, one codebook index per patch out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .batches import ImageBatch
from .checkpoint import load_params, save_params
from .encoders import patchify


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Codebook:
    entries: np.ndarray  # [K, code_dim] float64
    patch_size: int | None = None
    history: tuple[float, ...] = field(default=(), compare=False)  # quantization error per iteration

    def __post_init__(self):
        if self.entries.ndim != 2 or self.entries.shape[0] < 2:
            raise ValueError("a codebook needs at least 2 entries")
        if len(np.unique(self.entries, axis=0)) != self.entries.shape[0]:
            raise ValueError("codebook entries must be distinct")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def code_dim(self) -> int:
        return self.entries.shape[1]

    def save(self, path: str | Path) -> None:
        save_params(
            path,
            {"codebook.entries": self.entries},
            kind="codebook",
            extra={"patch_size": self.patch_size, "history": list(self.history)},
        )

    @classmethod
    def load(cls, path: str | Path) -> Codebook:
        params, meta = load_params(path, kind="codebook")
        return cls(params["codebook.entries"], meta.get("patch_size"), tuple(meta.get("history", ())))


def _sq_distances(x: np.ndarray, c: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact squared distances [N, K], computed from differences so ties stay exact."""
    out = np.empty((x.shape[0], c.shape[0]))
    for i in range(0, x.shape[0], chunk):
        diff = x[i : i + chunk, None, :] - c[None, :, :]
        out[i : i + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def quantize(features: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Nearest entry per row; ties go to the lowest index."""
    return _sq_distances(np.asarray(features, dtype=np.float64), entries).argmin(axis=1)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = _sq_distances(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise InsufficientDataError("fewer distinct points than codebook entries")
        idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_distances(x, x[idx][None])[:, 0])
    return np.stack(centers)


def fit_codebook(
    features: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iter: int = 100,
    patch_size: int | None = None,
) -> Codebook:
    """Lloyd k-means with k-means++ seeding.

    Stops when the assignment no longer changes or after ``max_iter``
    iterations. The quantization error after each assignment step is kept
    in ``Codebook.history`` and never increases.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be [N, code_dim]")
    if x.shape[0] < k:
        raise InsufficientDataError(f"need at least {k} feature vectors, got {x.shape[0]}")
    if len(np.unique(x, axis=0)) < k:
        raise InsufficientDataError(f"need at least {k} distinct feature vectors")

    centers = _kmeans_pp(x, k, rng)
    assign = None
    history: list[float] = []
    for _ in range(max_iter):
        d2 = _sq_distances(x, centers)
        new_assign = d2.argmin(axis=1)
        point_err = d2[np.arange(len(x)), new_assign]
        history.append(float(point_err.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        occupied = counts > 0
        centers[occupied] = sums[occupied] / counts[occupied, None]
        # an empty cluster takes over the worst-fit point, which can only lower the error
        taken: set[int] = set()
        for j in np.flatnonzero(~occupied):
            order = np.argsort(-point_err, kind="stable")
            pick = next(int(i) for i in order if int(i) not in taken)
            taken.add(pick)
            centers[j] = x[pick]
            point_err[pick] = 0.0
    return Codebook(centers, patch_size, tuple(history))


def patch_features(images: ImageBatch | torch.Tensor, patch_size: int) -> np.ndarray:
    """Flattened raw pixel patches, [B * N, C * p * p]."""
    pixels = images.pixels if isinstance(images, ImageBatch) else images
    p = patchify(pixels.detach().cpu().to(torch.float64), patch_size)
    return p.reshape(-1, p.shape[-1]).numpy()


def tokenize(images: ImageBatch | torch.Tensor, codebook: Codebook, patch_size: int | None = None) -> torch.Tensor:
    """Codebook index of every patch, int64 [B, N_patches]."""
    patch_size = patch_size or codebook.patch_size
    if patch_size is None:
        raise ValueError("patch size unknown; pass it or fit the codebook with one")
    pixels = images.pixels if isinstance(images, ImageBatch) else images
    feats = patch_features(pixels, patch_size)
    if feats.shape[1] != codebook.code_dim:
        raise ValueError(f"patch dim {feats.shape[1]} does not match codebook dim {codebook.code_dim}")
    idx = quantize(feats, codebook.entries)
    return torch.from_numpy(idx.reshape(pixels.shape[0], -1)).long()
