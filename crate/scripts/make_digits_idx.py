#!/usr/bin/env python3
"""Build the desk-scale digit fixtures in data/digits/ from the `mnist` npm package.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_digits_idx.py package/src/digits data/digits

The package ships ~1000 MNIST digits per class as 28x28 floats in [0, 1].
The first 500 of each class go to the training file, the next 200 to the
test file. Pixels are quantized back to bytes with round(v * 255).
"""
import json
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 500
TEST_PER_CLASS = 200
SIDE = 28


def write_idx(path, dims, payload):
    with open(path, "wb") as f:
        f.write(bytes([0, 0, 0x08, len(dims)]))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    splits = {"train": ([], []), "test": ([], [])}
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(flat) // (SIDE * SIDE)
        assert n >= TRAIN_PER_CLASS + TEST_PER_CLASS, (digit, n)
        for i in range(TRAIN_PER_CLASS + TEST_PER_CLASS):
            img = flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            px = [max(0, min(255, round(v * 255))) for v in img]
            split = "train" if i < TRAIN_PER_CLASS else "test"
            splits[split][0].extend(px)
            splits[split][1].append(digit)
    for split, (images, labels) in splits.items():
        write_idx(dst / f"{split}-images.idx", [len(labels), SIDE, SIDE], images)
        write_idx(dst / f"{split}-labels.idx", [len(labels)], labels)
        print(split, len(labels))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
