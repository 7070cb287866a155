#!/usr/bin/env python3
"""Full MUTAG ablation at paper scale: both labelling procedures x both
classifiers, 10-fold CV, one combined report.

Usage: python scripts/run_mutag_ablation.py [--data-root DIR] [--preset paper]
Expects MUTAG in TU flat-file format under the data root.
"""

import argparse
import os
import sys

from graphcaps.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-root", default=os.environ.get("GRAPHCAPS_DATA", "data"))
    parser.add_argument("--out-root", default="results/mutag_ablation")
    parser.add_argument("--preset", choices=["paper", "small"], default="paper")
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()

    run_dirs = []
    for labelling in ("bc", "canonical"):
        for model in ("capsules", "cnn"):
            rc = cli_main([
                "run", "--dataset", "MUTAG", "--labelling", labelling,
                "--model", model, "--preset", args.preset, "--folds", "10",
                "--seed", str(args.seed), "--data-root", args.data_root,
                "--out-root", args.out_root,
            ])
            if rc != 0:
                return rc
            run_dirs = [
                os.path.join(args.out_root, d)
                for d in os.listdir(args.out_root)
                if os.path.isfile(os.path.join(args.out_root, d, "result.json"))
            ]
    return cli_main(["report", *sorted(run_dirs), "-o", os.path.join(args.out_root, "report")])


if __name__ == "__main__":
    sys.exit(main())
