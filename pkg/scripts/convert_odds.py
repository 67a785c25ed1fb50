#!/usr/bin/env python3
"""Convert ODDS .mat outlier-detection datasets to the CSV schema this repo
consumes: columns f0..f{d-1} then 'label', with label 1 marking anomalies.

ODDS files store features under 'X' and binary outlier labels under 'y'
(1 = outlier). Requires scipy (``pip install ssadvae[odds]``).

Usage:
    python scripts/convert_odds.py thyroid.mat cardio.mat --out data/odds/
"""
import argparse
import csv
import os
import sys


def convert(mat_path: str, out_dir: str) -> str:
    from scipy.io import loadmat

    data = loadmat(mat_path)
    if "X" not in data or "y" not in data:
        raise SystemExit(f"{mat_path}: expected 'X' and 'y' variables, "
                         f"found {sorted(k for k in data if not k.startswith('__'))}")
    x = data["X"]
    y = data["y"].ravel().astype(int)
    if x.shape[0] != y.shape[0]:
        raise SystemExit(f"{mat_path}: X has {x.shape[0]} rows but y has {y.shape[0]}")

    name = os.path.splitext(os.path.basename(mat_path))[0]
    out_path = os.path.join(out_dir, f"{name}.csv")
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(x.shape[1])] + ["label"])
        for row, label in zip(x, y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
    print(f"{mat_path}: {x.shape[0]} rows, {x.shape[1]} features, "
          f"{int(y.sum())} anomalies -> {out_path}")
    return out_path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("mat_files", nargs="+", help=".mat files from the ODDS repository")
    parser.add_argument("--out", default="data/odds", help="output directory")
    args = parser.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    for path in args.mat_files:
        convert(path, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
