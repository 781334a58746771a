#!/usr/bin/env python3
"""Convert the 10k MNIST digits bundled in the npm `mnist` package into IDX files.

Usage: make_desk_mnist.py <unpacked npm package dir> <out dir>

The npm package stores each digit class as a JSON array of pixel intensities
rounded to three decimals; they are mapped back to bytes with round(v * 255).
Samples are interleaved with a fixed permutation so that any prefix mixes classes.
"""
import json
import pathlib
import struct
import sys

import numpy as np


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__)
        return 1
    src = pathlib.Path(sys.argv[1]) / "src" / "digits"
    out = pathlib.Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)

    images, labels = [], []
    for digit in range(10):
        data = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"], dtype=np.float64)
        block = np.clip(np.rint(data.reshape(-1, 28 * 28) * 255.0), 0, 255).astype(np.uint8)
        images.append(block)
        labels.extend([digit] * len(block))
    images = np.concatenate(images)
    labels = np.asarray(labels, dtype=np.uint8)

    order = np.random.default_rng(20181105).permutation(len(labels))
    images, labels = images[order], labels[order]

    with open(out / "mnist-desk-images.idx", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.tobytes())
    with open(out / "mnist-desk-labels.idx", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.tobytes())
    print(f"wrote {len(labels)} samples to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
