"""Write the desk-scale synthetic fixtures and a matching config.

    python scripts/make_synthetic_data.py --out data/desk --seed 0

Produces pairs/images/texts ``.npz`` files for pretraining, a two-class
``cls.npz`` / ``cls_val.npz`` pair for probing and fine-tuning, and
``desk.toml`` pointing at the pretraining files.
"""

import argparse
import dataclasses
from pathlib import Path

import numpy as np

from flava.config import DatasetSpec, desk_config, save_config
from flava.data import make_classification_pairs, write_desk_corpus


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/desk")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--pairs", type=int, default=64)
    args = parser.parse_args()

    cfg = desk_config()
    out = Path(args.out)
    paths = write_desk_corpus(out, cfg.model, seed=args.seed, n=args.pairs)
    rng = np.random.default_rng([args.seed, 1])
    make_classification_pairs(200, cfg.model, rng).save(out / "cls.npz")
    make_classification_pairs(100, cfg.model, rng).save(out / "cls_val.npz")

    specs = (
        DatasetSpec("multimodal_pairs", str(paths["pairs"]), 0.70),
        DatasetSpec("unimodal_images", str(paths["images"]), 0.15),
        DatasetSpec("unimodal_text", str(paths["texts"]), 0.15),
    )
    train = dataclasses.replace(cfg.train, datasets=specs, seed=args.seed)
    model = dataclasses.replace(cfg.model, seed=args.seed)
    save_config(dataclasses.replace(cfg, train=train, model=model), out / "desk.toml")
    for p in sorted(out.iterdir()):
        print(p)


if __name__ == "__main__":
    main()
