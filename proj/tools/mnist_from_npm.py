#!/usr/bin/env python3
"""Convert the digit samples bundled with the `mnist` npm package into IDX files.

The package ships ~10k real MNIST digits as JSON arrays of 28x28 floats in
[0, 1]. We write them back out in the distribution IDX layout (gzipped),
split per digit: the first TRAIN_PER_DIGIT samples go to the training set,
the remainder to the test set.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_from_npm.py package data/mnist
"""

import argparse
import gzip
import json
import pathlib
import struct

TRAIN_PER_DIGIT = 800
SIDE = 28


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("package_dir")
    ap.add_argument("out_dir")
    args = ap.parse_args()

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        src = pathlib.Path(args.package_dir) / "src" / "digits" / f"{digit}.json"
        raw = json.loads(src.read_text())["data"]
        n = len(raw) // (SIDE * SIDE)
        for i in range(n):
            px = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            img = [max(0, min(255, round(v * 255))) for v in px]
            images, labels = split["train" if i < TRAIN_PER_DIGIT else "t10k"]
            images.append(img)
            labels.append(digit)

    for name, (images, labels) in split.items():
        write_idx_images(out / f"{name}-images-idx3-ubyte.gz", images)
        write_idx_labels(out / f"{name}-labels-idx1-ubyte.gz", labels)
        print(f"{name}: {len(labels)} samples")


if __name__ == "__main__":
    main()
