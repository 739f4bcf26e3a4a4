#!/usr/bin/env python3
"""Convert the 10k-digit MNIST subset shipped in the `mnist` npm package
(src/digits/<d>.json, pixels stored as byte/255 rounded to 3 decimals) into
standard IDX files named like the official test split.

usage: mnist_subset_to_idx.py <npm-package-dir> <out-dir>
"""
import json
import random
import struct
import sys
from pathlib import Path


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for digit in range(10):
        data = json.loads((src / "src" / "digits" / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(len(data) // 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784])
            records.append((digit, px))
    random.Random(0).shuffle(records)
    n = len(records)
    with open(out / "t10k-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for _, px in records:
            f.write(px)
    with open(out / "t10k-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(d for d, _ in records))
    print(f"wrote {n} records to {out}")


if __name__ == "__main__":
    main()
