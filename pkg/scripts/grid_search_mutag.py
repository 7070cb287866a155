#!/usr/bin/env python3
"""Hyper-parameter grid search on MUTAG: epochs x learning rate x decay
(36 cells at the default grid), 10-fold CV per cell.

Usage: python scripts/grid_search_mutag.py [--data-root DIR] [--preset small]
"""

import argparse
import os
import sys

from graphcaps.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-root", default=os.environ.get("GRAPHCAPS_DATA", "data"))
    parser.add_argument("--out-root", default="results/grid")
    parser.add_argument("--preset", choices=["paper", "small"], default="small")
    parser.add_argument("--epochs-grid", default="100,150,200")
    parser.add_argument("--lr-grid", default="0.0005,0.001,0.005")
    parser.add_argument("--decay-grid", default="0.25,0.4,0.75,1.5")
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()
    return cli_main([
        "grid", "--dataset", "MUTAG", "--labelling", "bc", "--model", "capsules",
        "--preset", args.preset, "--folds", "10", "--seed", str(args.seed),
        "--epochs-grid", args.epochs_grid, "--lr-grid", args.lr_grid,
        "--decay-grid", args.decay_grid,
        "--data-root", args.data_root, "--out-root", args.out_root,
    ])


if __name__ == "__main__":
    sys.exit(main())
