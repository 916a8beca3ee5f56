"""The full model: three encoders, contrastive projections, and pretraining heads."""

from __future__ import annotations

import math
from pathlib import Path

import torch
from torch import Tensor, nn

from .batches import ImageBatch, TextBatch
from .checkpoint import CheckpointError, load_params, save_params
from .config import ModelConfig, validate_config
from .encoders import ImageEncoder, MultimodalEncoder, TextEncoder, init_weights, seeded_generator
from .objectives import MaskedPredictionHead

# Each top-level module draws its init from its own stream, so re-initializing
# one of them does not depend on the others.
_INIT_STREAMS = {
    "image_encoder": 1,
    "text_encoder": 2,
    "multimodal_encoder": 3,
    "image_projection": 4,
    "text_projection": 5,
    "mim_head": 6,
    "mlm_head": 7,
    "mmm_image_head": 8,
    "mmm_text_head": 9,
    "itm_head": 10,
}

ENCODER_PREFIXES = ("image_encoder", "text_encoder", "multimodal_encoder")


class FlavaModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = validate_config(config)
        d, k, v = config.hidden_size, config.codebook_size, config.text_vocab_size
        self.image_encoder = ImageEncoder(config)
        self.text_encoder = TextEncoder(config)
        self.multimodal_encoder = MultimodalEncoder(config)
        self.image_projection = nn.Linear(d, config.projection_dim)
        self.text_projection = nn.Linear(d, config.projection_dim)
        # log(1 / temperature)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / config.temperature_init)))
        self.mim_head = MaskedPredictionHead(d, k, config.layer_norm_eps)
        self.mlm_head = MaskedPredictionHead(d, v, config.layer_norm_eps)
        self.mmm_image_head = MaskedPredictionHead(d, k, config.layer_norm_eps)
        self.mmm_text_head = MaskedPredictionHead(d, v, config.layer_norm_eps)
        self.itm_head = nn.Linear(d, 1)
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int, only: tuple[str, ...] | None = None) -> None:
        with torch.no_grad():
            for name, stream in _INIT_STREAMS.items():
                if only is None or name in only:
                    init_weights(getattr(self, name), self.config.init_std, seeded_generator(seed, stream))
            if only is None:
                self.logit_scale.fill_(math.log(1.0 / self.config.temperature_init))
        if self.config.tie_mlm_weights:
            self.mlm_head.decoder.weight = self.text_encoder.token_embed.weight

    @property
    def max_logit_scale(self) -> float:
        return math.log(1.0 / self.config.temperature_min)

    @property
    def temperature(self) -> Tensor:
        """Learned temperature, never below ``temperature_min``."""
        return 1.0 / self.logit_scale.clamp(max=self.max_logit_scale).exp()

    def contrastive_embeddings(self, images: ImageBatch, texts: TextBatch) -> tuple[Tensor, Tensor]:
        """Projected CLS embeddings from an unmasked forward pass."""
        if images.patch_mask is not None:
            raise ValueError("contrastive embeddings must come from unmasked images")
        h_i = self.image_encoder(images)
        h_t = self.text_encoder(texts)
        return self.image_projection(h_i.cls), self.text_projection(h_t.cls)

    @torch.no_grad()
    def embed_images(self, images: ImageBatch) -> Tensor:
        return self.image_projection(self.image_encoder(images).cls)

    @torch.no_grad()
    def embed_texts(self, texts: TextBatch) -> Tensor:
        return self.text_projection(self.text_encoder(texts).cls)

    def named_arrays(self, prefix: str | None = None) -> dict[str, Tensor]:
        state = self.state_dict()
        if prefix is None:
            return dict(state)
        return {k: v for k, v in state.items() if k.startswith(prefix + ".")}

    def save(self, path: str | Path, prefix: str | None = None) -> None:
        kind = prefix or "model"
        save_params(path, self.named_arrays(prefix), kind=kind, extra={"hidden_size": self.config.hidden_size})

    def load_arrays(self, params: dict, prefixes: tuple[str, ...]) -> list[str]:
        """Copy arrays whose names start with one of ``prefixes``; returns loaded names."""
        own = self.state_dict()
        loaded = []
        for name, value in params.items():
            if not name.startswith(tuple(p + "." for p in prefixes)):
                continue
            if name not in own:
                raise CheckpointError(f"unknown parameter {name}")
            if tuple(value.shape) != tuple(own[name].shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {tuple(value.shape)} vs model {tuple(own[name].shape)}"
                )
            with torch.no_grad():
                own[name].copy_(torch.as_tensor(value))
            loaded.append(name)
        return loaded


def load_model(path: str | Path, config: ModelConfig) -> FlavaModel:
    params, _ = load_params(path, kind="model")
    model = FlavaModel(config)
    model.load_arrays(params, tuple(_INIT_STREAMS) + ("logit_scale",))
    if "logit_scale" in params:
        with torch.no_grad():
            model.logit_scale.copy_(torch.as_tensor(params["logit_scale"]))
    return model
