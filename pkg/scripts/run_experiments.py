"""Desk-scale experiments on the synthetic 4-class dataset.

    python3 scripts/run_experiments.py learning-signal   # bl7 vs none vs bl8, 4 folds x 3 seeds
    python3 scripts/run_experiments.py skip-ablation     # the four skip-connection rows, copy-over probe
    python3 scripts/run_experiments.py k-sweep           # support budget k in {1,3,5,7,10}

Training runs of the learning-signal experiment are cached under
scripts/results/cache, keyed by parameters and library source; the
acceptance test reads the same cache.
"""
import argparse
import json
import logging
from pathlib import Path

from fewshot_seg import experiments as E

HERE = Path(__file__).resolve().parent
RESULTS = HERE / "results"
CACHE = RESULTS / "cache"


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("experiment", choices=["learning-signal", "skip-ablation", "k-sweep"])
    ap.add_argument("--iters", type=int, default=100, help="iterations per epoch")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--fold", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bn-mode", default="infer", choices=E.BN_MODES)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    RESULTS.mkdir(exist_ok=True)

    if args.experiment == "learning-signal":
        out = E.learning_signal(CACHE, iters_per_epoch=args.iters)
    elif args.experiment == "skip-ablation":
        out = E.skip_ablation(args.fold, args.seed, args.iters, args.epochs, args.bn_mode)
    else:
        out = E.k_sweep(args.fold, args.seed, iters_per_epoch=args.iters, epochs=args.epochs, bn_mode=args.bn_mode)
    path = RESULTS / f"{args.experiment}.json"
    path.write_text(json.dumps(out, indent=1, default=str))
    print(json.dumps(out, indent=1, default=str))
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
