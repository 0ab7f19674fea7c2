"""Build the gzip IDX MNIST subset used by the test suite.

Input is the `mnist` npm package (1.1.0), whose src/digits/{0..9}.json hold
about 1000 images each (10000 in total) as flat arrays of 784 floats in [0, 1].

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python scripts/make_mnist_idx.py package/src/digits crates/core/tests/data
"""

import gzip
import json
import struct
import sys
from pathlib import Path


def write_gz(path, payload):
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as out:
            out.write(payload)


def main(src, dst):
    src, dst = Path(src), Path(dst)
    images, labels = [], []
    per_digit = [json.loads((src / f"{d}.json").read_text())["data"] for d in range(10)]
    longest = max(len(d) // 784 for d in per_digit)
    # interleave digits so any prefix is close to class balanced
    for i in range(longest):
        for digit, flat in enumerate(per_digit):
            if (i + 1) * 784 > len(flat):
                continue
            pixels = flat[i * 784:(i + 1) * 784]
            images.append(bytes(min(255, max(0, round(v * 255))) for v in pixels))
            labels.append(digit)
    n = len(labels)
    dst.mkdir(parents=True, exist_ok=True)
    write_gz(dst / "mnist-images-idx3-ubyte.gz", struct.pack(">IIII", 0x803, n, 28, 28) + b"".join(images))
    write_gz(dst / "mnist-labels-idx1-ubyte.gz", struct.pack(">II", 0x801, n) + bytes(labels))
    print(f"wrote {n} images to {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
