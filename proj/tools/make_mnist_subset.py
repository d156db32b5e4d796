#!/usr/bin/env python3
"""Build the desk-scale MNIST subset (2000 train / 1000 test) as IDX files.

Source: the 5000-sample MNIST extract shipped inside the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz, 500 images per digit drawn from the
official MNIST training set). Usage:

    pip download mlxtend --no-deps -d /tmp/mlx
    python3 tools/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist-desk
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def write_idx(out_dir: Path, stem: str, images: np.ndarray, labels: np.ndarray) -> None:
    n = images.shape[0]
    with open(out_dir / f"{stem}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, n, 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with open(out_dir / f"{stem}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, n))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    wheel, out_dir = sys.argv[1], Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = gzip.decompress(zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.StringIO(raw.decode()), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1], table[:, -1]

    train_idx, test_idx = [], []
    for digit in range(10):
        rows = np.flatnonzero(labels == digit)
        train_idx.extend(rows[:200])
        test_idx.extend(rows[200:300])
    rng = np.random.default_rng(20201)
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)

    write_idx(out_dir, "train", pixels[train_idx], labels[train_idx])
    write_idx(out_dir, "t10k", pixels[test_idx], labels[test_idx])


if __name__ == "__main__":
    main()
