"""Deterministic synthetic test images in [0, 1]."""

from __future__ import annotations

import numpy as np

from .sparsity import idct2


def dct_sparse_texture(size: int, nonzeros: int, rng: np.random.Generator, amplitude: float = 0.25) -> np.ndarray:
    """Zero-mean texture with ``nonzeros`` random AC coefficients in the 2-D DCT domain."""
    c = np.zeros(size * size)
    idx = rng.choice(np.arange(1, size * size), size=nonzeros, replace=False)
    c[idx] = rng.normal(0.0, 1.0, nonzeros)
    t = idct2(c.reshape(size, size))
    return amplitude * t / np.abs(t).max()


def quadrant_texture(size: int = 64, seed: int = 0, nonzeros: int = 40) -> np.ndarray:
    """Flat grey image whose top-left quadrant carries a DCT-sparse high-detail texture."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size), 0.5)
    q = size // 2
    img[:q, :q] += dct_sparse_texture(q, nonzeros, rng)
    return np.clip(img, 0.0, 1.0)


def synthetic_images(n: int, size: int = 64, seed: int = 0) -> np.ndarray:
    """n×size×size stack of smooth gradients with discs, bars and a textured patch."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((n, size, size))
    for k in range(n):
        gx, gy = rng.uniform(-0.4, 0.4, 2)
        img = 0.5 + gx * (xx - 0.5) + gy * (yy - 0.5)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0.1, 0.9, 2)
            r = rng.uniform(0.08, 0.25)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] += rng.uniform(-0.35, 0.35)
        if rng.random() < 0.5:
            x0, x1 = np.sort(rng.uniform(0, 1, 2))
            img[:, (xx[0] >= x0) & (xx[0] < x1)] += rng.uniform(-0.2, 0.2)
        q = size // 2
        oy, ox = rng.integers(0, size - q + 1, 2)
        img[oy : oy + q, ox : ox + q] += dct_sparse_texture(q, 20, rng, amplitude=0.15)
        out[k] = np.clip(img, 0.0, 1.0)
    return out
