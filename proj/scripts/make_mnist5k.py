#!/usr/bin/env python3
"""Builds the bundled 5k MNIST subset as gzipped IDX files.

Source: the 5,000-digit MNIST sample shipped inside the `mlxtend` wheel
(mlxtend/data/data/mnist_5k.csv.gz; 784 pixel columns then the label).
Usage: make_mnist5k.py <mlxtend wheel> <out dir>
"""
import gzip
import random
import struct
import sys
import zipfile


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + bytes(payload))


def main():
    wheel, out = sys.argv[1], sys.argv[2]
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = [list(map(int, l.split(","))) for l in gzip.decompress(raw).decode().split()]
    random.Random(0).shuffle(rows)
    splits = {"train": rows[:4000], "t10k": rows[4000:]}
    for name, part in splits.items():
        pixels = [p for r in part for p in r[:-1]]
        labels = [r[-1] for r in part]
        write_idx(f"{out}/{name}-images-idx3-ubyte.gz", 0x00000803, [len(part), 28, 28], pixels)
        write_idx(f"{out}/{name}-labels-idx1-ubyte.gz", 0x00000801, [len(part)], labels)


if __name__ == "__main__":
    main()
