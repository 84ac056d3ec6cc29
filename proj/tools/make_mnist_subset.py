#!/usr/bin/env python3
"""Build the bundled MNIST subset as IDX files.

Source: mnist_5k.csv.gz shipped inside the mlxtend wheel (BSD-3-Clause),
5000 rows of 784 pixels followed by the label, 500 per class, sorted by class.
Each class is split 400 train / 100 test, and both splits are interleaved
round-robin by class so any prefix is class-balanced.

    pip download mlxtend==0.24.0 --no-deps -d /tmp/mlx
    python3 tools/make_mnist_subset.py /tmp/mlx/mlxtend-0.24.0-py3-none-any.whl data
"""
import argparse
import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def load_rows(source: Path) -> np.ndarray:
    if source.suffix == ".whl":
        raw = gzip.decompress(zipfile.ZipFile(source).read(MEMBER))
    else:
        raw = gzip.decompress(source.read_bytes())
    return np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.uint8)


def interleave(groups):
    out = []
    for i in range(max(len(g) for g in groups)):
        out.extend(g[i] for g in groups if i < len(g))
    return np.array(out)


def write_idx(prefix: Path, rows: np.ndarray) -> None:
    pixels, labels = rows[:, :-1], rows[:, -1]
    n = len(rows)
    with open(f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(pixels.tobytes())
    with open(f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.tobytes())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", type=Path, help="mlxtend wheel or mnist_5k.csv.gz")
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--train-per-class", type=int, default=400)
    args = ap.parse_args()

    rows = load_rows(args.source)
    train, test = [], []
    for c in range(10):
        idx = np.flatnonzero(rows[:, -1] == c)
        train.append(idx[: args.train_per_class])
        test.append(idx[args.train_per_class :])
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "mnist5k-train", rows[interleave(train)])
    write_idx(args.out_dir / "mnist5k-test", rows[interleave(test)])


if __name__ == "__main__":
    main()
