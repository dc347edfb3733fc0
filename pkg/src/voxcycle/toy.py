"""Synthetic unpaired two-domain data for desk-scale training runs.

Domain A volumes are bright Gaussian blobs on a dark background. Domain B
volumes are built from fresh, independent blob volumes whose intensities
are inverted inside a spherical head mask and then smoothed, so no B volume
is the image of any A volume.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import Volume


def blob_volume(rng: np.random.Generator, size: int = 24, n_blobs: int = 3) -> np.ndarray:
    grid = np.indices((size,) * 3, dtype=np.float64)
    out = np.zeros((size,) * 3)
    for _ in range(n_blobs):
        center = rng.uniform(0.3 * size, 0.7 * size, size=3)
        width = rng.uniform(0.08, 0.16) * size
        amp = rng.uniform(0.6, 1.0)
        d2 = sum((grid[a] - center[a]) ** 2 for a in range(3))
        out += amp * np.exp(-d2 / (2 * width ** 2))
    return np.clip(out, 0.0, 1.0) * head_mask(size) * 100.0


def head_mask(size: int) -> np.ndarray:
    grid = np.indices((size,) * 3, dtype=np.float64)
    c = (size - 1) / 2
    r2 = sum((grid[a] - c) ** 2 for a in range(3))
    return (r2 <= (0.45 * size) ** 2).astype(np.float64)


def inverted_volume(rng: np.random.Generator, size: int = 24, sigma: float = 1.0) -> np.ndarray:
    mask = head_mask(size)
    a = blob_volume(rng, size)
    return gaussian_filter((100.0 - a) * mask, sigma) * mask


def make_domains(n: int = 20, size: int = 24, seed: int = 0) -> tuple[list[Volume], list[Volume]]:
    rng = np.random.default_rng(seed)
    dom_a = [Volume(blob_volume(rng, size).astype(np.float32)[None]) for _ in range(n)]
    dom_b = [Volume(inverted_volume(rng, size).astype(np.float32)[None]) for _ in range(n)]
    return dom_a, dom_b
