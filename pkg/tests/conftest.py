import numpy as np
import pytest
import torch

from flava.batches import ImageBatch, PairBatch, TextBatch
from flava.config import CLS_ID, PAD_ID, SEP_ID, desk_config
from flava.model import FlavaModel


@pytest.fixture
def desk():
    return desk_config()


@pytest.fixture
def model(desk):
    return FlavaModel(desk.model)


@pytest.fixture
def model64(desk):
    return FlavaModel(desk.model).double()


def make_texts(batch, seq_len, vocab, seed=0, pad=0):
    g = torch.Generator().manual_seed(seed)
    ids = torch.randint(5, vocab, (batch, seq_len), generator=g)
    ids[:, 0] = CLS_ID
    ids[:, seq_len - 1 - pad] = SEP_ID
    mask = torch.ones(batch, seq_len, dtype=torch.bool)
    if pad:
        ids[:, seq_len - pad :] = PAD_ID
        mask[:, seq_len - pad :] = False
    return TextBatch(ids, mask)


def make_images(batch, size=32, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return ImageBatch(torch.rand(batch, 3, size, size, generator=g, dtype=dtype))


def make_pairs(batch, seed=0, dtype=torch.float32):
    return PairBatch(make_images(batch, seed=seed, dtype=dtype), make_texts(batch, 8, 1000, seed=seed), torch.ones(batch, dtype=torch.bool))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def short_run_config(data_dir, total=12, seed=0, n=32, **train):
    """Desk config over a freshly written synthetic corpus, cut to ``total`` updates."""
    import dataclasses

    from flava.config import DatasetSpec
    from flava.data import write_desk_corpus

    cfg = desk_config()
    paths = write_desk_corpus(data_dir, cfg.model, seed=seed, n=n)
    specs = (
        DatasetSpec("multimodal_pairs", str(paths["pairs"]), 0.70),
        DatasetSpec("unimodal_images", str(paths["images"]), 0.15),
        DatasetSpec("unimodal_text", str(paths["texts"]), 0.15),
    )
    optim = dataclasses.replace(cfg.optim, total_updates=total, warmup_updates=min(cfg.optim.warmup_updates, total // 3))
    defaults = dict(datasets=specs, seed=seed, eval_interval=4, checkpoint_interval=6)
    defaults.update(train)
    return dataclasses.replace(cfg, optim=optim, train=dataclasses.replace(cfg.train, **defaults))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
