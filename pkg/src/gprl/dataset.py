"""Procedural grayscale blob images.

Each image is a dark background (0.05) plus 1-3 additive Gaussian bumps
with uniform random parameters, clamped to [0, 1]:

    count      ~ uniform{1, 2, 3}
    center x,y ~ uniform(0.15, 0.85) * side
    width      ~ uniform(side/10, side/4)
    intensity  ~ uniform(0.4, 1.0)

Generation is fully determined by (count, side, seed).
"""

from __future__ import annotations

import numpy as np

from .seeds import derive_seed

BACKGROUND = 0.05


def make_blob_dataset(count: int, side: int, seed: int) -> np.ndarray:
    """[count, side, side] float32 images in [0, 1]."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(derive_seed(seed, "blob-dataset"))
    yy, xx = np.mgrid[0:side, 0:side]
    out = np.empty((count, side, side), dtype=np.float32)
    for k in range(count):
        img = np.full((side, side), BACKGROUND, dtype=np.float64)
        for _ in range(rng.integers(1, 4)):
            cx = rng.uniform(0.15, 0.85) * side
            cy = rng.uniform(0.15, 0.85) * side
            width = rng.uniform(side / 10.0, side / 4.0)
            intensity = rng.uniform(0.4, 1.0)
            img += intensity * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2)
                                      / (2.0 * width ** 2))
        out[k] = np.clip(img, 0.0, 1.0)
    return out
