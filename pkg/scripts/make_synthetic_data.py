#!/usr/bin/env python3
"""Generate the three toy datasets (binary abnormality, eight-class
multi-label, vessel segmentation) as image folders with manifest CSVs.

Example:
    python3 scripts/make_synthetic_data.py --out toy_data --n 120 --seed 0
"""

import argparse
from pathlib import Path

from fundusfm.synthetic import (generate_abnormality, generate_multilabel,
                                generate_vessels, write_classification,
                                write_segmentation)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("toy_data"),
                        help="output directory (default: toy_data)")
    parser.add_argument("--n", type=int, default=120,
                        help="images per classification dataset (default: 120)")
    parser.add_argument("--size", type=int, default=64,
                        help="classification image resolution (default: 64)")
    parser.add_argument("--seed", type=int, default=0,
                        help="base random seed (default: 0)")
    args = parser.parse_args()

    ab = write_classification(
        generate_abnormality(args.n, size=args.size, seed=args.seed),
        args.out, name="abnormality")
    ml = write_classification(
        generate_multilabel(args.n, size=args.size, seed=args.seed + 1),
        args.out, name="multi_disease")
    ves = write_segmentation(
        generate_vessels(max(12, args.n // 4), size=96, seed=args.seed + 2),
        args.out, name="vessels")

    for task, path in (("abnormality", ab), ("multi_disease", ml),
                       ("vessel_segmentation", ves)):
        print(f"{task}: {path}")


if __name__ == "__main__":
    main()
