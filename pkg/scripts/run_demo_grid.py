#!/usr/bin/env python3
"""End-to-end demo on toy data: fundus pretraining, a scratch baseline, a
fundus linear-probe grid over label fractions with DeLong comparisons
against the baseline, report tables/plots, and an audit.

Runs in about a minute on CPU. Artifacts land under --out:
    <out>/artifacts/runs/...       per-cell run directories
    <out>/artifacts/reports/...    summary tables and plots
    <out>/artifacts/ledger.jsonl   append-only run ledger

Example:
    python3 scripts/run_demo_grid.py --out demo --seed 0
"""

import argparse
import sys
from pathlib import Path

import yaml

from fundusfm.cli import main as fundusfm
from fundusfm.config import ExperimentConfig, config_hash
from fundusfm.synthetic import generate_abnormality, write_classification


def step(argv: list[str]) -> None:
    print(f"\n$ fundusfm {' '.join(argv)}")
    rc = fundusfm(argv)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("demo"),
                        help="demo directory (default: demo)")
    parser.add_argument("--n", type=int, default=60,
                        help="toy dataset size (default: 60)")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for data and training (default: 0)")
    args = parser.parse_args()

    out = args.out
    artifacts = out / "artifacts"
    manifest = write_classification(
        generate_abnormality(args.n, size=64, seed=args.seed + 3),
        out / "data", name="demo")
    print(f"toy manifest: {manifest}")

    base = {
        "task_kind": "abnormality", "resolution": 64,
        "manifest_path": str(manifest), "base_width": 8, "seed": args.seed,
        "spec": {"learning_rate": 1e-3, "max_epochs": 2, "patience": 0,
                 "batch_size": 16},
    }

    pretrain_cfg = out / "pretrain.yaml"
    pretrain_cfg.write_text(yaml.safe_dump(
        {**base, "regime": "fundus", "protocol": "full_train"}))

    # scratch baseline first: it is the DeLong reference for the fundus cells
    scratch_mapping = {**base, "regime": "scratch", "protocol": "linear_probe",
                       "n_folds": 2}
    scratch_hash = config_hash(ExperimentConfig.from_mapping(
        scratch_mapping, base_dir=out))
    scratch_cfg = out / "scratch.yaml"
    scratch_cfg.write_text(yaml.safe_dump(scratch_mapping))

    fundus_cfg = out / "fundus_grid.yaml"
    fundus_cfg.write_text(yaml.safe_dump({
        **base, "regime": "fundus", "protocol": "linear_probe", "n_folds": 2,
        "reference": scratch_hash[:12],
        "grid": {"fraction": [0.5, 1.0]},
    }))

    step(["pretrain", "--config", str(pretrain_cfg), "--out", str(artifacts)])
    step(["downstream", "--config", str(scratch_cfg), "--out", str(artifacts)])
    step(["downstream", "--config", str(fundus_cfg), "--out", str(artifacts)])
    step(["report", "--out", str(artifacts)])
    step(["audit", "--out", str(artifacts)])

    print(f"\ndone; see {artifacts}/reports/summary.md for the result tables")


if __name__ == "__main__":
    main()
