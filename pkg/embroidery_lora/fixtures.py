"""
Synthetic 64x64 fixtures for desk-scale runs.

A fixture design is a handful of flat-colored shapes on a light background;
the matching embroidery renders the same layout with a seeded satin-stitch
texture (directional stripes, thread jitter and dark stitch gaps).
"""

from typing import Tuple

import numpy as np

from embroidery_lora.images import ImageArray, quantize

FIXTURE_SIZE = 64


def _shape_masks(rng: np.random.Generator, size: int, count: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    masks = np.zeros((count, size, size), dtype=bool)
    for i in range(count):
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
        if rng.random() < 0.5:
            radius = rng.uniform(0.12 * size, 0.3 * size)
            masks[i] = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        else:
            hy, hx = rng.uniform(0.1 * size, 0.25 * size, size=2)
            masks[i] = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    return masks


def synthetic_design(seed: int, size: int = FIXTURE_SIZE) -> ImageArray:
    """Flat-color graphic design built from seeded shapes."""
    rng = np.random.default_rng(seed)
    background = rng.uniform(0.85, 1.0, size=3)
    image = np.broadcast_to(background, (size, size, 3)).copy()
    for mask in _shape_masks(rng, size, int(rng.integers(2, 5))):
        image[mask] = rng.uniform(0.05, 0.9, size=3)
    return quantize(image)


def synthetic_embroidery(seed: int, size: int = FIXTURE_SIZE) -> ImageArray:
    """Embroidered rendering of ``synthetic_design(seed)``."""
    design = synthetic_design(seed, size)
    rng = np.random.default_rng(seed + 7919)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(2.5, 4.0)
    phase = (xx * np.cos(angle) + yy * np.sin(angle)) / period
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * phase)
    gaps = (np.mod(phase, 1.0) < 0.15).astype(np.float64)
    jitter = rng.normal(0.0, 0.04, size=(size, size))
    shade = 0.75 + 0.35 * stripes + jitter - 0.35 * gaps
    return quantize(design * shade[:, :, None])


def synthetic_pair(seed: int, size: int = FIXTURE_SIZE) -> Tuple[ImageArray, ImageArray]:
    """(embroidery, design) fixture pair."""
    return synthetic_embroidery(seed, size), synthetic_design(seed, size)


def checkerboard(size: int = FIXTURE_SIZE) -> ImageArray:
    """One-pixel black/white checkerboard."""
    yy, xx = np.mgrid[0:size, 0:size]
    board = ((yy + xx) % 2).astype(np.float64)
    return np.repeat(board[:, :, None], 3, axis=2)
