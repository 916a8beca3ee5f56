"""Configuration dataclasses, presets, and the TOML config file format.

A config file has a top-level ``version`` key and three tables,
``[model]``, ``[optim]`` and ``[train]``. Unknown keys anywhere are
errors, so a typo in a hyperparameter name never passes silently::

    version = 1

    [model]
    hidden_size = 64
    ...

    [[train.datasets]]
    kind = "multimodal_pairs"
    source = "data/pairs.npz"
    sampling_probability = 0.7

Dotted overrides (``optim.learning_rate=5e-4``) are parsed as TOML literals,
falling back to a bare string.
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_VERSION = 1

# Reserved text token ids. Real vocabularies put these first as well.
PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
MASK_ID = 3
UNK_ID = 4
NUM_SPECIAL_TOKENS = 5
SPECIAL_IDS = (PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID)

DATASET_KINDS = ("multimodal_pairs", "unimodal_images", "unimodal_text")


class ConfigError(ValueError):
    """Invalid configuration. ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int = 768
    num_heads: int = 12
    intermediate_size: int = 3072
    image_layers: int = 12
    text_layers: int = 12
    multimodal_layers: int = 6
    dropout: float = 0.0
    patch_size: int = 16
    image_size: int = 224
    num_channels: int = 3
    pixel_mean: float = 0.5  # inputs in [0, 1] are standardized as (x - mean) / std
    pixel_std: float = 0.5
    text_vocab_size: int = 30522
    max_text_len: int = 512
    codebook_size: int = 8192
    projection_dim: int = 512
    mask_rate_text: float = 0.15
    mask_ratio_image: float = 0.4
    mask_min_block: int = 16
    mask_min_aspect: float = 0.3
    mlm_bert_split: bool = False
    tie_mlm_weights: bool = False
    temperature_init: float = 0.07
    temperature_min: float = 0.01
    init_std: float = 0.02
    layer_norm_eps: float = 1e-6
    seed: int = 0

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.num_channels * self.patch_size**2


@dataclass(frozen=True)
class OptimConfig:
    batch_size: int = 8192
    learning_rate: float = 1e-3
    schedule: str = "warmup_cosine"
    warmup_updates: int = 10000
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_updates: int = 150000
    grad_clip: float = 0.0  # 0 disables clipping


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    source: str
    sampling_probability: float


@dataclass(frozen=True)
class TrainConfig:
    datasets: tuple[DatasetSpec, ...] = ()
    itm_neg_fraction: float = 0.5
    loss_weights: dict[str, float] = field(
        default_factory=lambda: {k: 1.0 for k in ("gc", "mmm_image", "mmm_text", "itm", "mim", "mlm")}
    )
    eval_interval: int = 8000
    checkpoint_interval: int = 8000
    eval_data: str = ""
    codebook: str = ""
    codebook_fit_images: int = 4096
    seed: int = 0


@dataclass(frozen=True)
class FlavaConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    version: int = CONFIG_VERSION


def _check_positive(cfg: Any, names: tuple[str, ...]) -> None:
    for name in names:
        value = getattr(cfg, name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ConfigError(name, f"must be a positive integer, got {value!r}")


def _check_fraction(cfg: Any, names: tuple[str, ...]) -> None:
    for name in names:
        value = getattr(cfg, name)
        if not 0.0 <= float(value) <= 1.0:
            raise ConfigError(name, f"must be a fraction in [0, 1], got {value!r}")


def validate_config(config: ModelConfig) -> ModelConfig:
    """Return ``config`` unchanged if every invariant holds, else raise ConfigError."""
    _check_positive(
        config,
        (
            "hidden_size", "num_heads", "intermediate_size", "image_layers",
            "text_layers", "multimodal_layers", "patch_size", "image_size",
            "num_channels", "text_vocab_size", "max_text_len", "codebook_size",
            "projection_dim", "mask_min_block",
        ),
    )
    _check_fraction(config, ("dropout", "mask_rate_text", "mask_ratio_image"))
    if config.hidden_size % config.num_heads:
        raise ConfigError(
            "hidden_size",
            f"divisibility: hidden_size {config.hidden_size} is not divisible by num_heads {config.num_heads}",
        )
    if config.image_size % config.patch_size:
        raise ConfigError(
            "image_size",
            f"divisibility: image_size {config.image_size} is not divisible by patch_size {config.patch_size}",
        )
    if config.text_vocab_size <= NUM_SPECIAL_TOKENS:
        raise ConfigError("text_vocab_size", f"must exceed the {NUM_SPECIAL_TOKENS} reserved ids")
    if config.codebook_size < 2:
        raise ConfigError("codebook_size", "must be at least 2")
    if not 0.0 < config.mask_min_aspect <= 1.0:
        raise ConfigError("mask_min_aspect", "must be in (0, 1]")
    if not config.pixel_std > 0:
        raise ConfigError("pixel_std", "must be positive")
    if not config.temperature_init > 0 or not config.temperature_min > 0:
        raise ConfigError("temperature_init", "temperatures must be positive")
    return config


def validate_optim(optim: OptimConfig) -> OptimConfig:
    _check_positive(optim, ("batch_size", "total_updates"))
    if optim.schedule != "warmup_cosine":
        raise ConfigError("schedule", f"unsupported schedule {optim.schedule!r}")
    if optim.warmup_updates < 0:
        raise ConfigError("warmup_updates", "must be non-negative")
    if optim.warmup_updates > optim.total_updates:
        raise ConfigError("warmup_updates", "must not exceed total_updates")
    if optim.learning_rate <= 0:
        raise ConfigError("learning_rate", "must be positive")
    if optim.weight_decay < 0:
        raise ConfigError("weight_decay", "must be non-negative")
    return optim


def validate_train(train: TrainConfig) -> TrainConfig:
    for spec in train.datasets:
        if spec.kind not in DATASET_KINDS:
            raise ConfigError("datasets.kind", f"unknown dataset kind {spec.kind!r}")
        if not 0.0 <= spec.sampling_probability <= 1.0:
            raise ConfigError("datasets.sampling_probability", "must be in [0, 1]")
    if train.datasets:
        total = math.fsum(s.sampling_probability for s in train.datasets)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError("datasets.sampling_probability", f"probabilities sum to {total}, not 1")
    _check_fraction(train, ("itm_neg_fraction",))
    unknown = set(train.loss_weights) - {"gc", "mmm_image", "mmm_text", "itm", "mim", "mlm"}
    if unknown:
        raise ConfigError("loss_weights", f"unknown loss names {sorted(unknown)}")
    return train


def validate(config: FlavaConfig) -> FlavaConfig:
    if config.version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {config.version}")
    validate_config(config.model)
    validate_optim(config.optim)
    validate_train(config.train)
    return config


# ---------------------------------------------------------------------------
# presets


def paper_config() -> FlavaConfig:
    """Full-size hyperparameters: ViT-B/16 encoders, 6-layer fusion, batch 8192."""
    train = TrainConfig(
        datasets=(
            DatasetSpec("multimodal_pairs", "pmd", 0.70),
            DatasetSpec("unimodal_images", "imagenet-1k", 0.15),
            DatasetSpec("unimodal_text", "ccnews+bookcorpus", 0.15),
        ),
    )
    return FlavaConfig(model=ModelConfig(), optim=OptimConfig(), train=train)


def desk_config() -> FlavaConfig:
    """Scaled-down preset that trains in minutes on one CPU."""
    model = ModelConfig(
        hidden_size=64,
        num_heads=8,
        intermediate_size=256,
        image_layers=2,
        text_layers=2,
        multimodal_layers=2,
        patch_size=8,
        image_size=32,
        text_vocab_size=1000,
        max_text_len=16,
        codebook_size=256,
        projection_dim=32,
        mask_min_block=4,
    )
    optim = OptimConfig(
        batch_size=16,
        learning_rate=1e-3,
        warmup_updates=50,
        weight_decay=0.1,
        total_updates=500,
        grad_clip=1.0,
    )
    train = TrainConfig(eval_interval=100, checkpoint_interval=100, codebook_fit_images=256)
    return FlavaConfig(model=model, optim=optim, train=train)


PRESETS = {"paper": paper_config, "desk": desk_config}


# ---------------------------------------------------------------------------
# (de)serialization


def to_dict(config: FlavaConfig) -> dict[str, Any]:
    train = dataclasses.asdict(config.train)
    train["datasets"] = [dataclasses.asdict(s) for s in config.train.datasets]
    return {
        "version": config.version,
        "model": dataclasses.asdict(config.model),
        "optim": dataclasses.asdict(config.optim),
        "train": train,
    }


def _build(cls: type, data: dict[str, Any], section: str) -> Any:
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{section}.{sorted(unknown)[0]}", "unknown key")
    kwargs = {}
    for name, value in data.items():
        expected = known[name].type
        if expected in ("float", float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict[str, Any]) -> FlavaConfig:
    data = dict(data)
    version = data.pop("version", None)
    if version is None:
        raise ConfigError("version", "missing config version")
    unknown = set(data) - {"model", "optim", "train"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    model = _build(ModelConfig, data.get("model", {}), "model")
    optim = _build(OptimConfig, data.get("optim", {}), "optim")
    train_data = dict(data.get("train", {}))
    specs = tuple(_build(DatasetSpec, s, "train.datasets") for s in train_data.pop("datasets", []))
    if "loss_weights" in train_data:
        weights = TrainConfig().loss_weights
        weights.update({k: float(v) for k, v in train_data["loss_weights"].items()})
        train_data["loss_weights"] = weights
    train = dataclasses.replace(_build(TrainConfig, train_data, "train"), datasets=specs)
    return FlavaConfig(model=model, optim=optim, train=train, version=version)


def dumps(config: FlavaConfig) -> str:
    return tomli_w.dumps(to_dict(config))


def loads(text: str) -> FlavaConfig:
    return from_dict(tomllib.loads(text))


def save_config(config: FlavaConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(config))


def load_config(path: str | Path) -> FlavaConfig:
    """Load a config file, or a preset by name (``desk`` / ``paper``)."""
    if str(path) in PRESETS:
        return PRESETS[str(path)]()
    text = Path(path).read_text()
    try:
        return loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"cannot parse {path}: {exc}") from exc


def _parse_literal(raw: str) -> Any:
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(config: FlavaConfig, overrides: list[str]) -> FlavaConfig:
    """Apply ``section.key=value`` overrides and return a new config."""
    data = to_dict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(key, "unknown key")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(key, "unknown key")
        node[parts[-1]] = _parse_literal(raw.strip())
    return from_dict(data)
