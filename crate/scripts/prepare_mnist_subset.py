#!/usr/bin/env python3
"""Write a small MNIST subset in IDX format (gzip-compressed).

The 5000-image MNIST sample shipped inside the `mlxtend` wheel (500 images per
digit) is split per class into 400 training and 100 test images and written as

    train-images-idx3-ubyte.gz  train-labels-idx1-ubyte.gz
    t10k-images-idx3-ubyte.gz   t10k-labels-idx1-ubyte.gz

Usage: prepare_mnist_subset.py <mlxtend wheel or mnist_5k.csv.gz> <out dir>
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def load(path: Path) -> np.ndarray:
    if path.suffix == ".whl":
        with zipfile.ZipFile(path) as z:
            raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        raw = path.read_bytes()
    return np.genfromtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")


def write_idx(path: Path, array: np.ndarray, dims) -> None:
    header = struct.pack(">BBBB", 0, 0, 0x08, len(dims)) + b"".join(struct.pack(">I", d) for d in dims)
    # mtime=0 keeps the archives byte-stable
    with open(path, "wb") as f, gzip.GzipFile(fileobj=f, mode="wb", mtime=0, filename="") as g:
        g.write(header + array.astype(np.uint8).tobytes())


def main() -> None:
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    data = load(src)
    images, labels = data[:, :-1], data[:, -1].astype(int)
    train_idx, test_idx = [], []
    for c in range(10):
        members = np.flatnonzero(labels == c)
        train_idx.extend(members[:400])
        test_idx.extend(members[400:500])
    for name, idx in (("train", sorted(train_idx)), ("t10k", sorted(test_idx))):
        write_idx(out / f"{name}-images-idx3-ubyte.gz", images[idx], (len(idx), 28, 28))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", labels[idx], (len(idx),))


if __name__ == "__main__":
    main()
