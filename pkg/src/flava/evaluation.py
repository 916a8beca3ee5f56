"""Zero-shot retrieval and classification, linear probing, and fine-tuning heads."""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from torch import Tensor, nn

from .batches import ImageBatch, TextBatch
from .config import OptimConfig
from .data import ArrayDataset
from .schedule import build_optimizer, lr_at, set_lr

LAMBDA_GRID = tuple(float(x) for x in np.logspace(-6, 6, 13))
TASKS = ("vision_cls", "text_cls", "text_regression", "multimodal_cls", "concat_cls")


# ---------------------------------------------------------------------------
# retrieval


@dataclass(frozen=True, eq=False)
class RetrievalIndex:
    embeddings: Tensor  # [N, D], unit rows
    ids: np.ndarray

    @classmethod
    def build(cls, embeddings: Tensor, ids: Sequence[int] | None = None) -> RetrievalIndex:
        emb = F.normalize(embeddings.detach().to(torch.float64), dim=-1)
        ids = np.arange(len(emb)) if ids is None else np.asarray(ids)
        if len(ids) != len(emb):
            raise ValueError("one id per item")
        return cls(emb, ids)

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def gold_ranks(index: RetrievalIndex, queries: Tensor, gold: Mapping[int, int] | Sequence[int]) -> np.ndarray:
    """0-based rank of each query's gold item by cosine similarity.

    Ties are broken by item id ascending.
    """
    q = F.normalize(queries.detach().to(torch.float64), dim=-1)
    sims = (q @ index.embeddings.T).numpy()
    if isinstance(gold, Mapping):
        gold = [gold[i] for i in range(len(q))]
    gold = np.asarray(gold)
    if len(gold) != len(q):
        raise ValueError("gold item needed for every query")
    position = {int(item): j for j, item in enumerate(index.ids)}
    cols = np.array([position[int(g)] for g in gold])
    gold_sim = sims[np.arange(len(q)), cols][:, None]
    gold_id = gold[:, None]
    ahead = (sims > gold_sim) | ((sims == gold_sim) & (index.ids[None, :] < gold_id))
    return ahead.sum(axis=1)


def recall_at_k(index: RetrievalIndex, queries: Tensor, gold, k: int) -> float:
    """Fraction of queries whose gold item is among the top ``k``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > len(index):
        raise ValueError(f"k={k} exceeds the {len(index)} indexed items")
    return float(np.mean(gold_ranks(index, queries, gold) < k))


def retrieval_report(image_emb: Tensor, text_emb: Tensor, ks: Sequence[int] = (1, 5)) -> dict[str, float]:
    """Text retrieval (image queries) and image retrieval (text queries) over aligned pairs."""
    n = len(image_emb)
    gold = np.arange(n)
    report = {}
    for k in ks:
        if k > n:
            continue
        report[f"TR@{k}"] = recall_at_k(RetrievalIndex.build(text_emb), image_emb, gold, k)
        report[f"IR@{k}"] = recall_at_k(RetrievalIndex.build(image_emb), text_emb, gold, k)
    return report


@torch.no_grad()
def pair_retrieval(model, data: ArrayDataset, batch_size: int = 256) -> dict[str, float]:
    """Zero-shot retrieval metrics over the pairs in ``data`` using contrastive embeddings."""
    was_training = model.training
    model.eval()
    img, txt = [], []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        i, t = model.contrastive_embeddings(data.images(idx), data.texts(idx))
        img.append(i)
        txt.append(t)
    model.train(was_training)
    report = retrieval_report(torch.cat(img), torch.cat(txt))
    for k in (1, 5):
        if f"TR@{k}" in report:
            report[f"R@{k}"] = 0.5 * (report[f"TR@{k}"] + report[f"IR@{k}"])
    return report


# ---------------------------------------------------------------------------
# zero-shot classification


def class_embeddings(template_embeddings: Sequence[Tensor]) -> Tensor:
    """One unit vector per class: the normalised mean of its unit template embeddings."""
    rows = []
    for emb in template_embeddings:
        if len(emb) == 0:
            raise ValueError("every class needs at least one template")
        rows.append(F.normalize(F.normalize(emb.to(torch.float64), dim=-1).mean(0), dim=0))
    return torch.stack(rows)


def zero_shot_classify(
    image_emb: Tensor,
    class_templates: Sequence[Sequence[str]],
    embed_text: Callable[[list[str]], Tensor],
) -> np.ndarray:
    """Predicted class per image by cosine similarity to template-averaged class embeddings.

    ``class_templates[c]`` holds the prompts for class ``c`` (already filled
    in, e.g. ``"a photo of a dog."``). Ties go to the lowest class index.
    """
    if not class_templates or any(len(t) == 0 for t in class_templates):
        raise ValueError("empty template set")
    classes = class_embeddings([embed_text(list(t)) for t in class_templates])
    img = F.normalize(image_emb.detach().to(torch.float64), dim=-1)
    return (img @ classes.T).numpy().argmax(axis=1)


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeResult:
    accuracy: float
    lam: float
    scores: dict[float, float] = field(default_factory=dict)


def linear_probe(
    features,
    labels,
    lambda_grid: Sequence[float] = LAMBDA_GRID,
    val_features=None,
    val_labels=None,
    val_fraction: float = 0.2,
    seed: int = 0,
    max_iter: int = 1000,
) -> ProbeResult:
    """L2-regularised multinomial logistic regression (L-BFGS) swept over ``lambda_grid``.

    The regularisation strength is ``lam``, i.e. scikit-learn's ``C = 1 / lam``.
    Without an explicit validation set a seeded ``val_fraction`` split is held out.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if len(np.unique(y)) < 2:
        raise ValueError("linear probe needs at least two classes")
    if val_features is None:
        perm = np.random.default_rng(seed).permutation(len(x))
        n_val = max(1, int(round(val_fraction * len(x))))
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        x, y, xv, yv = x[train_idx], y[train_idx], x[val_idx], y[val_idx]
    else:
        xv, yv = np.asarray(val_features, dtype=np.float64), np.asarray(val_labels)
    scores = {}
    for lam in lambda_grid:
        clf = LogisticRegression(C=1.0 / lam, max_iter=max_iter)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            clf.fit(x, y)
        scores[float(lam)] = float((clf.predict(xv) == yv).mean())
    best = max(scores, key=lambda lam: (scores[lam], -lam))
    return ProbeResult(scores[best], best, scores)


@torch.no_grad()
def image_features(model, images: ImageBatch, batch_size: int = 256) -> Tensor:
    """CLS state from the final layer of the image encoder (before any fusion)."""
    encoder = model.image_encoder
    out = []
    for start in range(0, images.batch_size, batch_size):
        out.append(encoder(ImageBatch(images.pixels[start : start + batch_size])).cls)
    return torch.cat(out)


# ---------------------------------------------------------------------------
# fine-tuning


class ClassifierHead(nn.Module):
    """A linear layer, or Linear -> GELU -> Linear with a 1536-wide hidden layer."""

    def __init__(self, in_dim: int, num_outputs: int, kind: str = "two_layer", hidden: int = 1536):
        super().__init__()
        if kind not in ("linear", "two_layer"):
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind, self.in_dim, self.num_outputs = kind, in_dim, num_outputs
        if kind == "linear":
            self.net = nn.Linear(in_dim, num_outputs)
        else:
            self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, num_outputs))

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


@dataclass(frozen=True)
class FinetuneRecipe:
    learning_rate: float
    updates: int
    batch_size: int = 256
    weight_decay: float = 1e-2
    warmup_updates: int = 2000
    image_size: int = 224

    def optim(self) -> OptimConfig:
        return OptimConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            warmup_updates=min(self.warmup_updates, self.updates),
            weight_decay=self.weight_decay,
            total_updates=self.updates,
        )


RECIPES = {
    "vqa": FinetuneRecipe(1e-4, 44000, image_size=480),
    "snli_ve": FinetuneRecipe(1e-5, 24000),
    "hateful_memes": FinetuneRecipe(1e-5, 24000),
    "desk": FinetuneRecipe(1e-3, 150, batch_size=32, warmup_updates=15, image_size=32),
}


def head_input_dim(task: str, hidden: int) -> int:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    return 2 * hidden if task == "concat_cls" else hidden


def task_features(model, task: str, images: ImageBatch | None, texts: TextBatch | None) -> Tensor:
    """The CLS vector a task's head reads: h_cls_I, h_cls_T, h_cls_M, or [h_cls_I; h_cls_T]."""
    if task == "vision_cls":
        return model.image_encoder(images).cls
    if task in ("text_cls", "text_regression"):
        return model.text_encoder(texts).cls
    if task == "multimodal_cls":
        return model.multimodal_encoder(model.image_encoder(images), model.text_encoder(texts)).cls
    if task == "concat_cls":
        return torch.cat([model.image_encoder(images).cls, model.text_encoder(texts).cls], dim=-1)
    raise ValueError(f"unknown task {task!r}")


def concat_baseline_head(img_cls: Tensor, txt_cls: Tensor, head: ClassifierHead) -> Tensor:
    """Two-tower baseline: classify the concatenation of the image and text CLS vectors."""
    if img_cls.shape != txt_cls.shape:
        raise ValueError("image and text CLS vectors must share a shape")
    if head.in_dim != 2 * img_cls.shape[-1]:
        raise ValueError(f"head expects {head.in_dim} inputs, concatenation has {2 * img_cls.shape[-1]}")
    return head(torch.cat([img_cls, txt_cls], dim=-1))


@dataclass
class FinetuneResult:
    model: nn.Module
    head: ClassifierHead
    metric_name: str
    metric: float
    losses: list[float]


class _Tuned(nn.Module):
    def __init__(self, trunk, head):
        super().__init__()
        self.trunk, self.head = trunk, head


def _batches(data: ArrayDataset, task: str, index):
    images = data.images(index) if data.pixels is not None and task != "text_cls" and task != "text_regression" else None
    texts = data.texts(index) if data.token_ids is not None and task != "vision_cls" else None
    return images, texts


def evaluate_head(model, head: ClassifierHead, task: str, data: ArrayDataset, batch_size: int = 256) -> tuple[str, float]:
    was = model.training
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            images, texts = _batches(data, task, idx)
            preds.append(head(task_features(model, task, images, texts)))
    model.train(was)
    out = torch.cat(preds)
    if task == "text_regression":
        target = torch.as_tensor(data.labels, dtype=out.dtype)
        return "mse", float(F.mse_loss(out.squeeze(-1), target))
    return "accuracy", float((out.argmax(-1).numpy() == data.labels).mean())


def finetune_head(
    model,
    train: ArrayDataset,
    task: str,
    head: ClassifierHead,
    recipe: FinetuneRecipe,
    val: ArrayDataset | None = None,
    freeze_trunk: bool = False,
    seed: int = 0,
) -> FinetuneResult:
    """Train ``head`` on the task's CLS features, by default fine-tuning the trunk too.

    The input ``model`` is left untouched; the tuned copy is returned.
    """
    expected = head_input_dim(task, model.config.hidden_size)
    if head.in_dim != expected:
        raise ValueError(f"task {task} feeds {expected}-dim features, head takes {head.in_dim}")
    if (task == "text_regression") != (head.num_outputs == 1):
        raise ValueError("regression needs a 1-output head and classification a multi-output head")
    if train.labels is None:
        raise ValueError("fine-tuning data needs labels")

    trunk = copy.deepcopy(model)
    trunk.requires_grad_(not freeze_trunk)
    tuned = _Tuned(trunk, head)
    optim_cfg = recipe.optim()
    optimizer = build_optimizer(tuned, optim_cfg)
    rng = np.random.default_rng(seed)
    losses = []
    trunk.train(not freeze_trunk)
    for step in range(recipe.updates):
        set_lr(optimizer, lr_at(step, optim_cfg))
        idx = rng.choice(len(train), size=min(recipe.batch_size, len(train)), replace=False)
        images, texts = _batches(train, task, idx)
        out = head(task_features(trunk, task, images, texts))
        if task == "text_regression":
            loss = F.mse_loss(out.squeeze(-1), torch.as_tensor(train.labels[idx], dtype=out.dtype))
        else:
            loss = F.cross_entropy(out, torch.as_tensor(train.labels[idx]))
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    name, metric = evaluate_head(trunk, head, task, val if val is not None else train)
    return FinetuneResult(trunk, head, name, metric, losses)


@torch.no_grad()
def itm_accuracy(model, data: ArrayDataset, seed: int = 0) -> float:
    """Matching accuracy over every aligned pair plus one shuffled negative per image."""
    was = model.training
    model.eval()
    n = len(data)
    rng = np.random.default_rng(seed)
    negatives = (np.arange(n) + rng.integers(1, n, n)) % n
    h_img = model.image_encoder(data.images())
    h_txt = model.text_encoder(data.texts())
    pos = model.itm_head(model.multimodal_encoder(h_img, h_txt).cls).squeeze(-1)
    neg = model.itm_head(model.multimodal_encoder(h_img, h_txt.select(torch.from_numpy(negatives))).cls).squeeze(-1)
    model.train(was)
    return float(torch.cat([pos > 0, neg <= 0]).float().mean())
