#!/usr/bin/env python3
"""PTC reproduction at reduced scale: BC + capsules over the four animal
sub-datasets (MM/FM/MR/FR), small preset, averaged per convention.

Usage: python scripts/run_ptc_small.py [--data-root DIR]
Expects PTC_MM, PTC_FM, PTC_MR, PTC_FR under the data root.
"""

import argparse
import os
import sys

from graphcaps.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-root", default=os.environ.get("GRAPHCAPS_DATA", "data"))
    parser.add_argument("--out-root", default="results/ptc_small")
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()
    return cli_main([
        "run", "--dataset", "PTC", "--labelling", "bc", "--model", "capsules",
        "--preset", "small", "--folds", "10", "--seed", str(args.seed),
        "--data-root", args.data_root, "--out-root", args.out_root,
    ])


if __name__ == "__main__":
    sys.exit(main())
