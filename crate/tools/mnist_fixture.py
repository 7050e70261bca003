#!/usr/bin/env python3
"""Build IDX files from the MNIST digits bundled in the npm `mnist` package.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_fixture.py package/src/digits --out-dir /tmp/mnist

Writes a 1000-image held-out test split (the one committed under
crates/core/tests/data) and the remaining images as a training split.
The split is a fixed permutation (numpy seed 0).
"""
import argparse
import json
import os
import struct

import numpy as np


def load_digits(src):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = np.asarray(json.load(f)["data"], dtype=np.float64)
        flat = flat.reshape(-1, 784)
        images.append(np.clip(np.rint(flat * 255.0), 0, 255).astype(np.uint8))
        labels.append(np.full(len(flat), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def write_idx(prefix, images, labels):
    with open(prefix + "-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.write(images.tobytes())
    with open(prefix + "-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--test-count", type=int, default=1000)
    args = ap.parse_args()

    images, labels = load_digits(args.digits_dir)
    perm = np.random.default_rng(0).permutation(len(images))
    images, labels = images[perm], labels[perm]
    n = args.test_count
    os.makedirs(args.out_dir, exist_ok=True)
    write_idx(os.path.join(args.out_dir, "test"), images[:n], labels[:n])
    write_idx(os.path.join(args.out_dir, "train"), images[n:], labels[n:])
    print(f"test={n} train={len(images) - n}")


if __name__ == "__main__":
    main()
