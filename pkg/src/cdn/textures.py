"""Procedural texture images for the self-contained smoke benchmark."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Dataset


def _gradient(rng, yy, xx):
    theta = rng.uniform(0, 2 * np.pi)
    return np.cos(theta) * xx + np.sin(theta) * yy


def _checker(rng, yy, xx):
    period = rng.choice([8, 12, 16, 24, 32])
    theta = rng.uniform(0, np.pi / 2)
    u = np.cos(theta) * xx + np.sin(theta) * yy
    v = -np.sin(theta) * xx + np.cos(theta) * yy
    size = xx.shape[0]
    board = ((np.floor(u * size / period) + np.floor(v * size / period)) % 2) * 2 - 1
    return gaussian_filter(board, rng.uniform(0.5, 1.5))


def _filtered_noise(rng, yy, xx):
    field = gaussian_filter(rng.standard_normal(xx.shape), rng.uniform(2.0, 6.0), mode="wrap")
    return field / (np.abs(field).max() + 1e-12)


def _rings(rng, yy, xx):
    cy, cx = rng.uniform(-0.5, 0.5, size=2)
    r = np.hypot(yy - cy, xx - cx)
    return np.sin(2 * np.pi * r * rng.uniform(3, 8) + rng.uniform(0, 2 * np.pi))


COMPONENTS = (_gradient, _checker, _filtered_noise, _rings)


def texture(rng: np.random.Generator, size: int = 128, lo: float = 0.1, hi: float = 0.9) -> np.ndarray:
    """A seeded mixture of two or three components, rescaled to [lo, hi]; shape (1, size, size)."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    picks = rng.choice(len(COMPONENTS), size=int(rng.integers(2, 4)), replace=False)
    img = sum(rng.uniform(0.5, 1.0) * COMPONENTS[k](rng, yy, xx) for k in picks)
    img = (img - img.min()) / (img.max() - img.min() + 1e-12)
    # snap to the 8-bit grid so a save/load round trip is lossless
    img = np.rint((lo + (hi - lo) * img) * 255) / 255
    return img[None].astype(np.float32)


def smoke_dataset(seed: int = 0, count: int = 16, size: int = 128, n_test: int = 4,
                  lo: float = 0.1, hi: float = 0.9) -> tuple[Dataset, Dataset]:
    """``count`` textures split into (train, test) with ``n_test`` held out."""
    rng = np.random.default_rng(seed)
    images = [texture(rng, size, lo, hi) for _ in range(count)]
    names = [f"tex{i:02d}.pgm" for i in range(count)]
    k = count - n_test
    return Dataset(names[:k], images[:k]), Dataset(names[k:], images[k:])
