#!/usr/bin/env python3
"""Rebuild the bundled 10,000-digit MNIST subset as gzipped IDX files.

Source: the `mnist` npm package (MIT, Juan Cazala), which ships 10,000 MNIST
digits as JSON arrays of pixel values k/255 rounded to three decimals. The
rounding is injective, so the original bytes are recovered exactly.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_from_npm.py package/src/digits crates/core/data/mnist-subset
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

SEED = 20240101
N_TRAIN_FILE = 9000


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        raw = np.array(json.loads(Path(src, f"{digit}.json").read_text())["data"])
        pixels = np.round(raw * 255).astype(np.uint8).reshape(-1, 784)
        images.append(pixels)
        labels.append(np.full(len(pixels), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(SEED).permutation(len(labels))
    images, labels = images[order], labels[order]

    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    splits = {
        "train": slice(0, N_TRAIN_FILE),
        "t10k": slice(N_TRAIN_FILE, len(labels)),
    }
    for prefix, sl in splits.items():
        n = sl.stop - sl.start
        write_idx(out / f"{prefix}-images-idx3-ubyte.gz", 2051, (n, 28, 28), images[sl].tobytes())
        write_idx(out / f"{prefix}-labels-idx1-ubyte.gz", 2049, (n,), labels[sl].tobytes())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
