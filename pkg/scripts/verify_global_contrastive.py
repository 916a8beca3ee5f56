"""Print the global vs local contrastive gradient check for several worker counts.

    python scripts/verify_global_contrastive.py --batch 32 --workers 1 2 4 8
"""

import argparse

from flava.distributed import verify


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4, 8])
    args = parser.parse_args()
    print(f"{'K':>3} {'global rel err':>15} {'local rel err':>15} {'|g_local - g_global|':>21} {'loss gap':>10}")
    for k in args.workers:
        r = verify(k, args.batch)
        print(
            f"{k:>3} {r['global_max_rel_grad_error']:>15.2e} {r['local_max_rel_grad_error']:>15.2e} "
            f"{r['local_vs_global_grad_norm']:>21.3e} {r['loss_gap']:>10.1e}"
        )


if __name__ == "__main__":
    main()
