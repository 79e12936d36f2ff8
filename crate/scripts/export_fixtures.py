#!/usr/bin/env python3
"""Writes the IDX test fixtures under crates/core/tests/data.

digits-*.idx: the scikit-learn 8x8 handwritten digits (1797 samples),
pixel intensities rescaled from 0..16 to 0..255.
tiny-*.idx: two hand-specified 2x3 images used as a pixel-exact fixture.
"""

import struct
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "data"


def write_images(path, images):
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    pixels = np.rint(digits.images * 255.0 / 16.0).clip(0, 255)
    write_images(OUT / "digits-images.idx", pixels)
    write_labels(OUT / "digits-labels.idx", digits.target)

    tiny = np.array([[[0, 1, 2], [253, 254, 255]], [[17, 0, 128], [64, 32, 200]]])
    write_images(OUT / "tiny-images.idx", tiny)
    write_labels(OUT / "tiny-labels.idx", [7, 2])


if __name__ == "__main__":
    main()
