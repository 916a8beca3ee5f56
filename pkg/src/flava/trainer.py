"""Joint unimodal + multimodal pretraining with round-robin dataset sampling."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .batches import ImageBatch, PairBatch, TextBatch
from .checkpoint import load_params
from .config import DatasetSpec, FlavaConfig, from_dict, save_config, to_dict, validate
from .data import ArrayDataset
from .evaluation import pair_retrieval
from .masking import apply_mask, block_mask_batch, mlm_mask
from .model import FlavaModel
from .objectives import LossBundle, contrastive_loss, itm_loss, itm_negative_indices, mim_loss, mlm_loss, mmm_loss
from .schedule import build_optimizer, lr_at, set_lr
from .tokenizer import Codebook, fit_codebook, patch_features, tokenize

log = logging.getLogger(__name__)

STATE_VERSION = 1


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainState:
    config: FlavaConfig
    model: FlavaModel
    optimizer: torch.optim.AdamW
    codebook: Codebook
    rng: np.random.Generator
    step: int = 0
    loss_stats: dict[str, list[float]] = field(default_factory=dict)  # name -> [count, sum]
    best_metric: float = -math.inf
    best_step: int = -1

    def running_means(self) -> dict[str, float]:
        return {k: s / n for k, (n, s) in self.loss_stats.items() if n}


def round_robin_sample(specs: Sequence[DatasetSpec], rng: np.random.Generator) -> int:
    """Pick the dataset for the next batch: one categorical draw over the sampling probabilities."""
    probs = np.array([s.sampling_probability for s in specs], dtype=np.float64)
    if len(probs) == 0 or np.any(probs < 0) or abs(math.fsum(probs) - 1.0) > 1e-9:
        raise ValueError(f"sampling probabilities must be non-negative and sum to 1, got {probs.tolist()}")
    u = rng.random()
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u, side="right"))
    # guard against rounding in the cdf and never return a zero-probability dataset
    idx = min(idx, len(probs) - 1)
    while probs[idx] == 0:
        idx -= 1
    return idx


# ---------------------------------------------------------------------------
# state construction


def fit_codebook_for(config: FlavaConfig, datasets: Sequence[ArrayDataset]) -> Codebook:
    m = config.model
    pixels = [d.pixels for d in datasets if d.pixels is not None]
    if not pixels:
        raise ValueError("no image data available to fit the visual codebook")
    pool = np.concatenate(pixels)[: config.train.codebook_fit_images]
    feats = patch_features(torch.from_numpy(pool), m.patch_size)
    rng = np.random.default_rng([config.train.seed, 7])
    return fit_codebook(feats, m.codebook_size, rng, patch_size=m.patch_size)


def create_state(config: FlavaConfig, codebook: Codebook | None = None, datasets: Sequence[ArrayDataset] = ()) -> TrainState:
    validate(config)
    model = FlavaModel(config.model)
    if codebook is None:
        if config.train.codebook:
            codebook = Codebook.load(config.train.codebook)
        else:
            codebook = fit_codebook_for(config, datasets)
    if codebook.size != config.model.codebook_size or codebook.code_dim != config.model.patch_dim:
        raise ValueError("codebook does not match the model config")
    optimizer = build_optimizer(model, config.optim)
    return TrainState(config, model, optimizer, codebook, np.random.default_rng(config.train.seed))


def load_pretrained_encoders(
    state: TrainState, image_ckpt: str | Path | None = None, text_ckpt: str | Path | None = None
) -> TrainState:
    """Overwrite the image and/or text encoder from unimodal checkpoints.

    The multimodal encoder is never loaded; it keeps its random init.
    """
    for path, prefix in ((image_ckpt, "image_encoder"), (text_ckpt, "text_encoder")):
        if path is None:
            continue
        params, meta = load_params(path)
        if meta.get("kind") not in (prefix, "model"):
            raise ValueError(f"{path} holds {meta.get('kind')!r}, not an {prefix} checkpoint")
        loaded = state.model.load_arrays(params, (prefix,))
        if not loaded:
            raise ValueError(f"{path} has no {prefix} parameters")
        log.info("loaded %d %s arrays from %s", len(loaded), prefix, path)
    return state


def save_state(state: TrainState, path: str | Path) -> None:
    torch.save(
        {
            "version": STATE_VERSION,
            "config": json.dumps(to_dict(state.config)),
            "step": state.step,
            "model": state.model.state_dict(),
            "optimizer": state.optimizer.state_dict(),
            "rng": json.dumps(state.rng.bit_generator.state),
            "codebook": torch.from_numpy(state.codebook.entries),
            "codebook_patch_size": state.codebook.patch_size,
            "loss_stats": json.dumps(state.loss_stats),
            "best_metric": state.best_metric,
            "best_step": state.best_step,
        },
        path,
    )


def load_state(path: str | Path) -> TrainState:
    blob = torch.load(path, weights_only=True)
    if blob.get("version") != STATE_VERSION:
        raise ValueError(f"{path}: unsupported train-state version {blob.get('version')}")
    config = from_dict(json.loads(blob["config"]))
    codebook = Codebook(blob["codebook"].numpy(), blob["codebook_patch_size"])
    state = create_state(config, codebook=codebook)
    state.model.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.rng.bit_generator.state = json.loads(blob["rng"])
    state.step = blob["step"]
    state.loss_stats = json.loads(blob["loss_stats"])
    state.best_metric = blob["best_metric"]
    state.best_step = blob["best_step"]
    return state


def export_encoder(model: FlavaModel, which: str, path: str | Path) -> None:
    """Write one encoder's parameters as a unimodal init checkpoint."""
    prefix = {"image": "image_encoder", "text": "text_encoder"}[which]
    model.save(path, prefix=prefix)


# ---------------------------------------------------------------------------
# one update


def multimodal_losses(state: TrainState, batch: PairBatch) -> LossBundle:
    """GC on an unmasked forward, MMM on a masked forward, ITM on a forward with injected negatives."""
    model, m, rng = state.model, state.config.model, state.rng

    gc_img, gc_txt = model.contrastive_embeddings(batch.images, batch.texts)
    gc, _ = contrastive_loss(gc_img, gc_txt, model.temperature)

    codes = tokenize(batch.images, state.codebook, m.patch_size)
    image_plan = block_mask_batch(
        batch.batch_size, m.grid_size, m.mask_ratio_image, rng, m.mask_min_block, m.mask_min_aspect
    ).with_labels(codes)
    text_plan = mlm_mask(batch.texts, m.mask_rate_text, rng)
    masked_images = apply_mask(batch.images, image_plan)
    masked_texts = apply_mask(
        batch.texts, text_plan, bert_split=m.mlm_bert_split, vocab_size=m.text_vocab_size, rng=rng
    )
    fused = model.multimodal_encoder(model.image_encoder(masked_images), model.text_encoder(masked_texts))
    mmm_image, mmm_text = mmm_loss(fused, image_plan, text_plan, model.mmm_image_head, model.mmm_text_head)

    # negatives only reorder whole text rows, so the unmasked text states can be
    # gathered instead of re-encoding the permuted batch
    source, labels = itm_negative_indices(batch.batch_size, state.config.train.itm_neg_fraction, rng)
    h_img = model.image_encoder(batch.images)
    h_txt = model.text_encoder(batch.texts).select(torch.from_numpy(source))
    fused_itm = model.multimodal_encoder(h_img, h_txt)
    itm = itm_loss(fused_itm.cls, torch.from_numpy(labels), model.itm_head)
    return LossBundle(gc=gc, mmm_image=mmm_image, mmm_text=mmm_text, itm=itm)


def image_losses(state: TrainState, images: ImageBatch) -> LossBundle:
    model, m = state.model, state.config.model
    codes = tokenize(images, state.codebook, m.patch_size)
    plan = block_mask_batch(
        images.batch_size, m.grid_size, m.mask_ratio_image, state.rng, m.mask_min_block, m.mask_min_aspect
    ).with_labels(codes)
    h = model.image_encoder(apply_mask(images, plan))
    return LossBundle(mim=mim_loss(h, plan, model.mim_head))


def text_losses(state: TrainState, texts: TextBatch) -> LossBundle:
    model, m = state.model, state.config.model
    plan = mlm_mask(texts, m.mask_rate_text, state.rng)
    masked = apply_mask(texts, plan, bert_split=m.mlm_bert_split, vocab_size=m.text_vocab_size, rng=state.rng)
    return LossBundle(mlm=mlm_loss(model.text_encoder(masked), plan, model.mlm_head))


def compute_losses(state: TrainState, batch, kind: str) -> LossBundle:
    if kind == "multimodal_pairs":
        if not isinstance(batch, PairBatch):
            raise TypeError("multimodal_pairs expects a PairBatch")
        return multimodal_losses(state, batch)
    if kind == "unimodal_images":
        if not isinstance(batch, ImageBatch):
            raise TypeError("unimodal_images expects an ImageBatch")
        return image_losses(state, batch)
    if kind == "unimodal_text":
        if not isinstance(batch, TextBatch):
            raise TypeError("unimodal_text expects a TextBatch")
        return text_losses(state, batch)
    raise ValueError(f"unknown batch kind {kind!r}")


def _dump_batch(batch, path: Path) -> None:
    arrays = {}
    if isinstance(batch, PairBatch):
        arrays = {"pixels": batch.images.pixels, "token_ids": batch.texts.token_ids}
    elif isinstance(batch, ImageBatch):
        arrays = {"pixels": batch.pixels}
    elif isinstance(batch, TextBatch):
        arrays = {"token_ids": batch.token_ids}
    np.savez(path, **{k: v.numpy() for k, v in arrays.items()})


def train_step(
    state: TrainState,
    batch,
    kind: str,
    batch_id: str = "",
    dump_dir: str | Path | None = None,
) -> tuple[TrainState, LossBundle]:
    """One optimizer update on a single-dataset batch."""
    state.model.train()
    bundle = compute_losses(state, batch, kind)
    total = bundle.total(state.config.train.loss_weights)
    if not torch.isfinite(total):
        where = ""
        if dump_dir is not None:
            path = Path(dump_dir) / f"nonfinite_step{state.step}.npz"
            _dump_batch(batch, path)
            where = f"; batch dumped to {path}"
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step} ({kind}, batch {batch_id}): {bundle.as_floats()}{where}"
        )
    set_lr(state.optimizer, lr_at(state.step, state.config.optim))
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if state.config.optim.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), state.config.optim.grad_clip)
    state.optimizer.step()
    with torch.no_grad():
        state.model.logit_scale.clamp_(max=state.model.max_logit_scale)
    for name, value in bundle.as_floats().items():
        count, total_value = state.loss_stats.get(name, [0, 0.0])
        state.loss_stats[name] = [count + 1, total_value + value]
    state.step += 1
    return state, bundle


# ---------------------------------------------------------------------------
# full run


@dataclass
class PretrainResult:
    final_checkpoint: Path
    best_checkpoint: Path | None
    metrics_path: Path
    state: TrainState


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        if line.strip() and json.loads(line)["step"] <= step:
            keep.append(line)
    path.write_text("".join(line + "\n" for line in keep))


def _log(handle, record: dict) -> None:
    handle.write(json.dumps(record) + "\n")
    handle.flush()


def pretrain(
    config: FlavaConfig,
    out_dir: str | Path,
    budget: int | None = None,
    image_init: str | Path | None = None,
    text_init: str | Path | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> PretrainResult:
    """Run joint pretraining for ``budget`` updates (default: ``optim.total_updates``).

    Writes under ``out_dir``: ``metrics.jsonl`` (one record per step and per
    evaluation), ``checkpoints/step_NNNNNN.pt`` every ``checkpoint_interval``
    steps, ``best.pt`` (highest held-out R@1), ``final.pt``, and unimodal
    encoder exports in ``encoders/``. ``stop_after`` ends the run early at
    that step, as a kill would; ``resume`` continues from a train-state file.
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    specs = config.train.datasets
    if not specs:
        raise ValueError("config lists no training datasets")
    datasets = [ArrayDataset.load(s.source) for s in specs]

    if resume is not None:
        state = load_state(resume)
        _truncate_log(metrics_path, state.step)
    else:
        state = create_state(config, datasets=datasets)
        load_pretrained_encoders(state, image_init, text_init)
        metrics_path.write_text("")
        save_state(state, out / "checkpoints" / "step_000000.pt")
    config = state.config
    save_config(config, out / "resolved_config.toml")

    eval_set = None
    if config.train.eval_data:
        eval_set = ArrayDataset.load(config.train.eval_data)
    else:
        eval_set = next((d for d, s in zip(datasets, specs) if s.kind == "multimodal_pairs"), None)

    budget = config.optim.total_updates if budget is None else budget
    end = budget if stop_after is None else min(budget, stop_after)
    bs = config.optim.batch_size
    best_path = out / "best.pt"
    with metrics_path.open("a") as handle:
        while state.step < end:
            d = round_robin_sample(specs, state.rng)
            data, kind = datasets[d], specs[d].kind
            idx = np.sort(state.rng.choice(len(data), size=min(bs, len(data)), replace=False))
            lr = lr_at(state.step, config.optim)
            state, bundle = train_step(state, data.batch(kind, idx), kind, batch_id=f"{d}:{state.step}", dump_dir=out)
            _log(handle, {"event": "step", "step": state.step, "kind": kind, "lr": lr, "losses": bundle.as_floats()})
            if eval_set is not None and state.step % config.train.eval_interval == 0:
                metrics = pair_retrieval(state.model, eval_set)
                _log(handle, {"event": "eval", "step": state.step, **metrics})
                if metrics["R@1"] > state.best_metric:
                    state.best_metric, state.best_step = metrics["R@1"], state.step
                    save_state(state, best_path)
            if state.step % config.train.checkpoint_interval == 0:
                save_state(state, out / "checkpoints" / f"step_{state.step:06d}.pt")

    final = out / "final.pt"
    save_state(state, final)
    (out / "encoders").mkdir(exist_ok=True)
    export_encoder(state.model, "image", out / "encoders" / "image_encoder.npz")
    export_encoder(state.model, "text", out / "encoders" / "text_encoder.npz")
    state.model.save(out / "model.npz")
    state.codebook.save(out / "codebook.npz")
    return PretrainResult(final, best_path if best_path.exists() else None, metrics_path, state)
