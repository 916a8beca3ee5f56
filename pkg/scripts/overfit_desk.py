"""Joint desk-scale training on the 64-pair synthetic corpus, then report
the final contrastive loss, ITM training accuracy and training-set R@1.

    python scripts/overfit_desk.py --out runs/overfit --seed 0
"""

import argparse
import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np

from flava.config import DatasetSpec, apply_overrides, desk_config
from flava.data import ArrayDataset, write_desk_corpus
from flava.evaluation import itm_accuracy, pair_retrieval
from flava.trainer import pretrain


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/overfit")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("overrides", nargs="*")
    args = parser.parse_args()

    out = Path(args.out)
    cfg = desk_config()
    paths = write_desk_corpus(out / "data", cfg.model, seed=args.seed)
    specs = (
        DatasetSpec("multimodal_pairs", str(paths["pairs"]), 0.70),
        DatasetSpec("unimodal_images", str(paths["images"]), 0.15),
        DatasetSpec("unimodal_text", str(paths["texts"]), 0.15),
    )
    cfg = dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model, seed=args.seed),
        train=dataclasses.replace(cfg.train, datasets=specs, seed=args.seed),
    )
    cfg = apply_overrides(cfg, args.overrides)

    start = time.time()
    result = pretrain(cfg, out / "run")
    records = [json.loads(line) for line in result.metrics_path.read_text().splitlines()]
    gc = [r["losses"]["gc"] for r in records if r["event"] == "step" and "gc" in r["losses"]]
    pairs = ArrayDataset.load(paths["pairs"])
    summary = {
        "seconds": round(time.time() - start, 1),
        "gc_last10": float(np.mean(gc[-10:])),
        "ln_batch": math.log(cfg.optim.batch_size),
        "itm_accuracy": itm_accuracy(result.state.model, pairs),
        **pair_retrieval(result.state.model, pairs),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for k, v in summary.items():
        print(f"{k}={v}")


if __name__ == "__main__":
    main()
