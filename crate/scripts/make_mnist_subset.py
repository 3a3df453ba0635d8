#!/usr/bin/env python3
"""Build the bundled 10k-digit MNIST subset in IDX format.

Source: the `mnist` npm package (cazala/mnist), which ships 10,000 MNIST
digits as per-label JSON arrays of pixel intensities rounded to 3 decimals.
The digits are shuffled with a fixed seed and split 8000 train / 2000 test.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist-subset
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        for n in range(len(data) // 784):
            px = [min(255, max(0, round(v * 255))) for v in data[n * 784:(n + 1) * 784]]
            samples.append((px, digit))
    random.Random(0).shuffle(samples)
    train, test = samples[:8000], samples[8000:]
    dst.mkdir(parents=True, exist_ok=True)
    write_images(dst / "train-images-idx3-ubyte.gz", [s[0] for s in train])
    write_labels(dst / "train-labels-idx1-ubyte.gz", [s[1] for s in train])
    write_images(dst / "t10k-images-idx3-ubyte.gz", [s[0] for s in test])
    write_labels(dst / "t10k-labels-idx1-ubyte.gz", [s[1] for s in test])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
