"""``flava`` command-line entry point.

Every subcommand writes under ``--out`` (default: ``$FLAVA_OUT``) a
``run.json`` with the argv, seed and resolved config, so the run can be
repeated exactly. Failures print one line to stderr::

    error: <category>: <message>

with categories ``usage`` (exit 2), ``config`` (3), ``input`` (4) and
``runtime`` (5).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_CODES = {"usage": 2, "config": 3, "input": 4, "runtime": 5}
DEFAULT_TEMPLATES = ("a photo of a {}.", "a picture of a {}.")


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError("usage", message)


def _add_common(p: argparse.ArgumentParser, config: bool = True, seed: bool = True) -> None:
    p.add_argument("--out", default=os.environ.get("FLAVA_OUT"), help="output directory (default: $FLAVA_OUT)")
    if config:
        p.add_argument("--config", default="desk", help="config file, or preset name desk / paper")
        p.add_argument("overrides", nargs="*", metavar="section.key=value", help="dotted-key config overrides")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="overrides train.seed and model.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flava", description="desk-scale vision-language pretraining toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    corpus = sub.add_parser("corpus", help="corpus construction").add_subparsers(dest="action", required=True)
    build = corpus.add_parser("build", help="filter, dedupe and shard image-text sources")
    build.add_argument("--sources", required=True, help="source manifest (JSON)")
    build.add_argument("--shard-size", type=int, default=10_000)
    _add_common(build, config=False, seed=False)

    tok = sub.add_parser("tokenizer", help="visual tokenizer").add_subparsers(dest="action", required=True)
    fit = tok.add_parser("fit", help="fit the k-means patch codebook")
    fit.add_argument("--data", required=True, nargs="+", help=".npz datasets holding pixels")
    fit.add_argument("--max-images", type=int, default=None)
    _add_common(fit)

    pre = sub.add_parser("pretrain", help="joint pretraining")
    pre.add_argument("--image-init", default=None, help="image encoder checkpoint")
    pre.add_argument("--text-init", default=None, help="text encoder checkpoint")
    pre.add_argument("--resume", default=None, help="train-state file to continue from")
    pre.add_argument("--budget", type=int, default=None, help="number of updates (default optim.total_updates)")
    pre.add_argument("--stop-after", type=int, default=None, help="end the run early at this step")
    _add_common(pre)

    ev = sub.add_parser("eval", help="evaluation").add_subparsers(dest="action", required=True)
    for name, text in (
        ("retrieval", "zero-shot image/text retrieval over aligned pairs"),
        ("zeroshot", "zero-shot classification with text templates"),
        ("probe", "logistic-regression probe on image encoder features"),
        ("finetune", "fine-tune a classifier head"),
    ):
        p = ev.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True, help="train state (.pt) or model parameters (.npz)")
        p.add_argument("--data", required=True, help=".npz dataset")
        _add_common(p)
        if name == "zeroshot":
            p.add_argument("--classes", required=True, help="comma-separated class names, in label order")
            p.add_argument("--template", action="append", default=None, help="prompt with one {} slot; repeatable")
        if name in ("probe", "finetune"):
            p.add_argument("--val-data", default=None)
        if name == "finetune":
            p.add_argument("--task", default="multimodal_cls")
            p.add_argument("--recipe", default="desk")
            p.add_argument("--head", default="two_layer", choices=("linear", "two_layer"))
            p.add_argument("--freeze-trunk", action="store_true")

    ver = sub.add_parser("verify-global-contrastive", help="check global vs local contrastive gradients")
    ver.add_argument("--workers", type=int, default=4)
    ver.add_argument("--batch", type=int, default=32)
    ver.add_argument("--dim", type=int, default=16)
    ver.add_argument("--temperature", type=float, default=0.07)
    _add_common(ver, config=False)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _resolve_config(args):
    from .config import ConfigError, apply_overrides, load_config, validate

    try:
        cfg = apply_overrides(load_config(args.config), list(args.overrides))
        if args.seed is not None:
            cfg = dataclasses.replace(
                cfg,
                model=dataclasses.replace(cfg.model, seed=args.seed),
                train=dataclasses.replace(cfg.train, seed=args.seed),
            )
        return validate(cfg)
    except FileNotFoundError:
        raise CliError("input", f"config file not found: {args.config}") from None
    except ConfigError as e:
        raise CliError("config", str(e)) from None
    except TypeError as e:
        raise CliError("config", str(e)) from None


def _record_run(out: Path, argv: list[str], seed, config=None) -> None:
    from .config import save_config, to_dict

    out.mkdir(parents=True, exist_ok=True)
    record = {"argv": argv, "seed": seed, "config": to_dict(config) if config is not None else None}
    (out / "run.json").write_text(json.dumps(record, indent=2) + "\n")
    if config is not None:
        save_config(config, out / "resolved_config.toml")


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError("input", f"missing input {path}")
    return path


def _emit(out: Path, task: str, report: dict) -> None:
    """Print ``task=... metric=... value=...`` lines and append them to report.jsonl."""
    with open(out / "report.jsonl", "a") as handle:
        for metric, value in report.items():
            print(f"task={task} metric={metric} value={value}")
            handle.write(json.dumps({"task": task, "metric": metric, "value": value}) + "\n")


def _load_model(path: Path, cfg):
    from .model import load_model
    from .trainer import load_state

    if path.suffix == ".pt":
        return load_state(path).model
    return load_model(path, cfg.model)


# ---------------------------------------------------------------------------
# commands


def cmd_corpus_build(args, out: Path) -> None:
    from dataclasses import asdict

    from .corpus import build_corpus

    result = build_corpus(_require(args.sources), out, shard_size=args.shard_size)
    for key, value in asdict(result.stats).items():
        print(f"stat={key} value={json.dumps(value, sort_keys=True)}")
    for reason, count in sorted(result.rejected.items()):
        print(f"rejected={reason} count={count}")


def cmd_tokenizer_fit(args, out: Path, cfg) -> None:
    import torch

    from .data import ArrayDataset
    from .tokenizer import fit_codebook, patch_features

    pools = [ArrayDataset.load(_require(p)).pixels for p in args.data]
    if any(p is None for p in pools):
        raise CliError("input", "every --data file must hold pixels")
    pixels = np.concatenate(pools)[: args.max_images]
    feats = patch_features(torch.from_numpy(pixels), cfg.model.patch_size)
    rng = np.random.default_rng([cfg.train.seed, 7])
    codebook = fit_codebook(feats, cfg.model.codebook_size, rng, patch_size=cfg.model.patch_size)
    codebook.save(out / "codebook.npz")
    print(f"codebook={out / 'codebook.npz'} entries={codebook.size} iterations={len(codebook.history)} error={codebook.history[-1]}")


def cmd_pretrain(args, out: Path, cfg) -> None:
    from .trainer import pretrain

    for spec in cfg.train.datasets:
        _require(spec.source)
    result = pretrain(
        cfg,
        out,
        budget=args.budget,
        image_init=args.image_init and _require(args.image_init),
        text_init=args.text_init and _require(args.text_init),
        resume=args.resume and _require(args.resume),
        stop_after=args.stop_after,
    )
    print(f"final={result.final_checkpoint} best={result.best_checkpoint} metrics={result.metrics_path}")


def cmd_eval(args, out: Path, cfg) -> None:
    from .data import ArrayDataset
    from .evaluation import (
        RECIPES,
        ClassifierHead,
        finetune_head,
        head_input_dim,
        image_features,
        linear_probe,
        pair_retrieval,
        zero_shot_classify,
    )

    model = _load_model(_require(args.checkpoint), cfg)
    data = ArrayDataset.load(_require(args.data))
    if args.action == "retrieval":
        if data.pixels is None or data.token_ids is None:
            raise CliError("input", "retrieval data must hold pixels and token_ids")
        _emit(out, "retrieval", pair_retrieval(model, data))
    elif args.action == "zeroshot":
        from .text import HashTokenizer

        if data.pixels is None or data.labels is None:
            raise CliError("input", "zero-shot data must hold pixels and labels")
        names = [c.strip() for c in args.classes.split(",") if c.strip()]
        templates = args.template or list(DEFAULT_TEMPLATES)
        tok = HashTokenizer(cfg.model.text_vocab_size, cfg.model.max_text_len)
        prompts = [[t.format(c) for t in templates] for c in names]
        preds = zero_shot_classify(model.embed_images(data.images()), prompts, lambda p: model.embed_texts(tok(p)))
        _emit(out, "zeroshot", {"accuracy": float((preds == data.labels).mean())})
    elif args.action == "probe":
        val = ArrayDataset.load(_require(args.val_data)) if args.val_data else None
        feats = image_features(model, data.images()).numpy()
        kwargs = {}
        if val is not None:
            kwargs = {"val_features": image_features(model, val.images()).numpy(), "val_labels": val.labels}
        result = linear_probe(feats, data.labels, seed=cfg.train.seed, **kwargs)
        _emit(out, "probe", {"accuracy": result.accuracy, "lambda": result.lam})
    elif args.action == "finetune":
        if args.recipe not in RECIPES:
            raise CliError("config", f"unknown recipe {args.recipe!r}; choose from {sorted(RECIPES)}")
        val = ArrayDataset.load(_require(args.val_data)) if args.val_data else None
        outputs = 1 if args.task == "text_regression" else int(data.labels.max()) + 1
        try:
            head = ClassifierHead(head_input_dim(args.task, cfg.model.hidden_size), outputs, kind=args.head)
        except ValueError as e:
            raise CliError("config", str(e)) from None
        result = finetune_head(
            model, data, args.task, head, RECIPES[args.recipe], val=val, freeze_trunk=args.freeze_trunk, seed=cfg.train.seed
        )
        _emit(out, f"finetune/{args.task}", {result.metric_name: result.metric})


def cmd_verify(args, out: Path) -> None:
    from .distributed import verify

    try:
        report = verify(args.workers, args.batch, dim=args.dim, temperature=args.temperature, seed=args.seed or 0)
    except ValueError as e:
        raise CliError("config", str(e)) from None
    (out / "verify.json").write_text(json.dumps(report, indent=2) + "\n")
    for key, value in report.items():
        print(f"{key}={value}")
    if not (report["global_pass"] and report["local_pass"]):
        raise CliError("runtime", "gradient verification failed")


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if not args.out:
            raise CliError("usage", "--out is required (or set FLAVA_OUT)")
        out = Path(args.out)
        cfg = _resolve_config(args) if hasattr(args, "config") else None
        seed = cfg.train.seed if cfg is not None else getattr(args, "seed", None)
        if args.command == "verify-global-contrastive" and seed is None:
            seed = 0
        _record_run(out, argv, seed, cfg)
        if args.command == "corpus":
            cmd_corpus_build(args, out)
        elif args.command == "tokenizer":
            cmd_tokenizer_fit(args, out, cfg)
        elif args.command == "pretrain":
            cmd_pretrain(args, out, cfg)
        elif args.command == "eval":
            cmd_eval(args, out, cfg)
        else:
            args.seed = seed
            cmd_verify(args, out)
    except CliError as e:
        print(f"error: {e.category}: {_one_line(e)}", file=sys.stderr)
        return EXIT_CODES[e.category]
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001 - surfaced as a single categorised line
        from .corpus import CorpusError

        category = "input" if isinstance(e, (CorpusError, FileNotFoundError)) else "runtime"
        print(f"error: {category}: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return EXIT_CODES[category]
    return 0


def _one_line(e: Exception) -> str:
    return " ".join(str(e).split())


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
