"""Per-block sparsity estimates from the initial low-quality image, and budget allocation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import fft, ndimage

from .autodiff import ContractError
from .sampling import (
    MeasurementMatrix,
    MeasurementSet,
    SamplingConfig,
    adaptive_sample,
    initial_sample,
    partition_blocks,
)

ESTIMATORS = ("sm", "std", "diff", "uniform")
GAUSS_SIZE = 9
GAUSS_SIGMA = 2.0
# relative magnitude below which a DCT coefficient counts as zero for sign()
_SIGN_TOL = 1e-12
# absorbs rounding in rest·V/ΣV so that exactly-integral shares floor correctly
_FLOOR_TOL = 1e-9


@dataclass
class SparsityMap:
    V: np.ndarray
    method: str


@dataclass
class AllocationMap:
    m: np.ndarray
    total_budget: int
    n0: int
    sr_t: float

    @property
    def total(self) -> int:
        return int(self.m.sum())


def dct2(x: np.ndarray) -> np.ndarray:
    """Orthonormal type-II 2-D DCT."""
    return fft.dctn(np.asarray(x, dtype=np.float64), type=2, norm="ortho")


def idct2(c: np.ndarray) -> np.ndarray:
    return fft.idctn(np.asarray(c, dtype=np.float64), type=2, norm="ortho")


def gaussian_kernel(size: int = GAUSS_SIZE, sigma: float = GAUSS_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def low_quality_estimate(initial: np.ndarray, mm: MeasurementMatrix) -> np.ndarray:
    """Map each block's initial measurements through ``psi[:, :n0]`` and tile the result."""
    h, w, n0 = initial.shape
    B = mm.B
    vecs = initial.reshape(h * w, n0) @ mm.psi[:, :n0].T
    return vecs.reshape(h, w, B, B).transpose(0, 2, 1, 3).reshape(h * B, w * B)


def _uniform(h: int, w: int) -> np.ndarray:
    return np.full((h, w), 1.0 / (h * w))


def estimate_sparsity_sm(x0: np.ndarray, B: int) -> SparsityMap:
    """DCT sign-spectrum saliency, squared, Gaussian-smoothed and summed per block.

    The per-block sums are divided by the image total, so the map sums to one.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    blocks_shape = partition_blocks(x0, B).shape[:2]
    if np.ptp(x0) == 0.0:
        return SparsityMap(_uniform(*blocks_shape), "sm")
    c = dct2(x0)
    c[np.abs(c) <= _SIGN_TOL * np.abs(c).max()] = 0.0
    f = np.abs(idct2(np.sign(c)))
    s = ndimage.convolve(f * f, gaussian_kernel(), mode="mirror")
    per_block = partition_blocks(s, B).sum(axis=(2, 3))
    tot = per_block.sum()
    if tot <= 0.0:
        return SparsityMap(_uniform(*blocks_shape), "sm")
    return SparsityMap(per_block / tot, "sm")


def estimate_sparsity_std(x0: np.ndarray, B: int) -> SparsityMap:
    g = partition_blocks(x0, B)
    V = g.std(axis=(2, 3))
    # the mean of a constant block is not always representable; force exact zeros
    V[np.ptp(g, axis=(2, 3)) == 0.0] = 0.0
    return SparsityMap(V, "std")


def estimate_sparsity_diff(x0: np.ndarray, B: int) -> SparsityMap:
    """Mean absolute difference to the existing left/up/right/down neighbour blocks."""
    g = partition_blocks(x0, B)
    h, w = g.shape[:2]
    V = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            diffs = [
                np.abs(g[i, j] - g[a, b]).mean()
                for a, b in ((i, j - 1), (i - 1, j), (i, j + 1), (i + 1, j))
                if 0 <= a < h and 0 <= b < w
            ]
            V[i, j] = np.mean(diffs) if diffs else 0.0
    return SparsityMap(V, "diff")


def estimate_sparsity(x0: np.ndarray, B: int, method: str) -> SparsityMap:
    method = method.lower()
    if method == "sm":
        return estimate_sparsity_sm(x0, B)
    if method == "std":
        return estimate_sparsity_std(x0, B)
    if method == "diff":
        return estimate_sparsity_diff(x0, B)
    if method == "uniform":
        h, w = partition_blocks(x0, B).shape[:2]
        return SparsityMap(np.ones((h, w)), "uniform")
    raise ValueError(f"unknown sparsity estimator {method!r}; choose from {ESTIMATORS}")


def allocate(V, cfg: SamplingConfig, H: int, W: int) -> AllocationMap:
    """Split the measurement budget: n0 per block, the rest in proportion to V.

    Counts above M are clipped and the clipped surplus is handed out one
    measurement at a time to the remaining blocks in descending-V order.
    """
    V = np.asarray(getattr(V, "V", V), dtype=np.float64)
    h, w = H // cfg.B, W // cfg.B
    if V.shape != (h, w):
        raise ContractError(f"sparsity map shape {V.shape} does not match the {h}×{w} block grid")
    if np.any(V < 0) or not np.all(np.isfinite(V)):
        raise ContractError("sparsity values must be finite and non-negative")
    total = int(np.floor(cfg.sr_t * H * W))
    n0, M = cfg.n0, cfg.M
    rest = total - n0 * h * w
    if rest < 0:
        raise ContractError(f"initial sampling alone ({n0 * h * w}) exceeds the budget {total}")
    s = V.sum()
    weights = _uniform(h, w) if s <= 0.0 else V / s
    m = n0 + np.floor(rest * weights + _FLOOR_TOL).astype(np.int64)

    surplus = int(np.maximum(m - M, 0).sum())
    m = np.minimum(m, M)
    if surplus:
        order = np.argsort(-weights.reshape(-1), kind="stable")
        flat = m.reshape(-1)
        while surplus:
            open_blocks = [k for k in order if flat[k] < M]
            if not open_blocks:
                break
            for k in open_blocks:
                if not surplus:
                    break
                flat[k] += 1
                surplus -= 1
    return AllocationMap(m=m, total_budget=total, n0=n0, sr_t=cfg.sr_t)


def adaptive_measure(
    image: np.ndarray,
    mm: MeasurementMatrix,
    cfg: SamplingConfig,
    estimator: str = "sm",
) -> tuple[MeasurementSet, AllocationMap, np.ndarray]:
    """Initial sampling, sparsity estimate, allocation and adaptive sampling in one call.

    Returns the measurement set, the allocation and the low-quality estimate.
    """
    y0 = initial_sample(image, mm, cfg)
    x0 = low_quality_estimate(y0, mm)
    H, W = image.shape
    alloc = allocate(estimate_sparsity(x0, cfg.B, estimator), cfg, H, W)
    return adaptive_sample(image, mm, alloc, y0, cfg), alloc, x0


def allocation_for(
    image: np.ndarray,
    mm: MeasurementMatrix,
    cfg: SamplingConfig,
    estimator: str = "sm",
    x0: Optional[np.ndarray] = None,
) -> AllocationMap:
    if x0 is None:
        x0 = low_quality_estimate(initial_sample(image, mm, cfg), mm)
    H, W = image.shape
    return allocate(estimate_sparsity(x0, cfg.B, estimator), cfg, H, W)
