"""Parameter container: a ``.npz`` archive of named arrays plus a JSON header.

Parameter names follow the model's module paths, so subsets are addressable
by prefix::

    image_encoder.patch_embed.weight
    image_encoder.transformer.blocks.0.attn.qkv.weight
    text_encoder.token_embed.weight
    multimodal_encoder.cls_token
    codebook.entries

The header (stored under ``__meta__``) carries ``format``, ``version`` and
``kind`` (``model``, ``image_encoder``, ``text_encoder``, ``codebook``).
"""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

FORMAT = "flava-params"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(
    path: str | Path,
    params: Mapping[str, Any],
    kind: str,
    extra: dict | None = None,
) -> None:
    arrays = {}
    for name, value in params.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arrays[name] = np.asarray(value)
    meta = {"format": FORMAT, "version": VERSION, "kind": kind, **(extra or {})}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_params(path: str | Path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise CheckpointError(f"{path}: missing header")
        meta = json.loads(data["__meta__"].tobytes().decode())
        params = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {meta.get('version')}")
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"{path}: expected kind {kind!r}, found {meta.get('kind')!r}")
    return params, meta
