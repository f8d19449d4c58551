#!/usr/bin/env python3
"""Generate the synthetic demo fixture (datasets, clinical cohort,
config.json) for running the full CLI pipeline locally."""

import argparse
from pathlib import Path

from aucues.synthetic import write_pipeline_fixture


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", type=Path, help="fixture directory to create")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--subjects", type=int, default=8,
                        help="subjects per synthetic dataset")
    parser.add_argument("--samples", type=int, default=25,
                        help="samples per subject")
    parser.add_argument("--epochs", type=int, default=10)
    args = parser.parse_args()
    config = write_pipeline_fixture(args.out_dir, seed=args.seed,
                                    n_subjects=args.subjects,
                                    samples_per_subject=args.samples,
                                    epochs=args.epochs)
    print(f"wrote fixture; run the pipeline with: aucues --config {config} merge")


if __name__ == "__main__":
    main()
