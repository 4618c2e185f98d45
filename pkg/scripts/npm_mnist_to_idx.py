"""Convert the digit JSON files bundled in the npm ``mnist`` package to IDX.

The npm package (https://www.npmjs.com/package/mnist) ships 10,000 MNIST
digits as ``src/digits/<label>.json``, each holding a flat list of 784-pixel
images with intensities in [0, 1] rounded to three decimals.

Usage::

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/npm_mnist_to_idx.py package/src/digits data/mnist
"""

import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(src: str, dst: str, seed: int = 0) -> None:
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads(Path(src, f"{digit}.json").read_text())["data"])
        imgs = flat.reshape(-1, 784)
        images.append(np.rint(imgs * 255.0).clip(0, 255).astype(np.uint8))
        labels.append(np.full(len(imgs), digit, dtype=np.uint8))
    x = np.concatenate(images)
    y = np.concatenate(labels)
    # interleave classes so any contiguous holdout is roughly balanced
    order = np.random.default_rng(seed).permutation(len(y))
    x, y = x[order], y[order]

    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "train-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(x), 28, 28))
        f.write(x.tobytes())
    with gzip.GzipFile(out / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(y)))
        f.write(y.tobytes())
    print(f"wrote {len(y)} examples to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
