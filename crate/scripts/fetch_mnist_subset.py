#!/usr/bin/env python3
"""Build a small class-balanced MNIST subset in IDX format.

The 5000-digit MNIST sample bundled with the mlxtend wheel is sorted by
class (500 per digit). Rows are interleaved round-robin by class so that
any prefix is balanced, then written as

    train-images-idx3-ubyte / train-labels-idx1-ubyte   (first 2000 rows)
    t10k-images-idx3-ubyte  / t10k-labels-idx1-ubyte    (next 1000 rows)

Usage: fetch_mnist_subset.py [OUT_DIR]   (default: data/mnist-subset)
"""
import gzip
import io
import struct
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

TRAIN, TEST = 2000, 1000


def write_idx_images(path, images):
    n = images.shape[0]
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist-subset")
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, "mlxtend==0.24.0"],
            check=True,
        )
        wheel = next(Path(tmp).glob("mlxtend-*.whl"))
        raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")
    pixels, labels = table[:, :-1], table[:, -1].astype(int)

    by_class = [np.flatnonzero(labels == c) for c in range(10)]
    order = np.array([by_class[c][i] for i in range(500) for c in range(10)])
    pixels, labels = pixels[order], labels[order]

    write_idx_images(out / "train-images-idx3-ubyte", pixels[:TRAIN])
    write_idx_labels(out / "train-labels-idx1-ubyte", labels[:TRAIN])
    write_idx_images(out / "t10k-images-idx3-ubyte", pixels[TRAIN : TRAIN + TEST])
    write_idx_labels(out / "t10k-labels-idx1-ubyte", labels[TRAIN : TRAIN + TEST])
    print(f"wrote {TRAIN} train / {TEST} test digits to {out}")


if __name__ == "__main__":
    main()
