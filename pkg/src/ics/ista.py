"""Training-free block reconstruction: projection steps alternated with DCT soft-thresholding."""

from __future__ import annotations

import numpy as np

from .autodiff import ContractError
from .projection import project_block
from .sampling import MeasurementMatrix, MeasurementSet, image_from_vectors
from .sparsity import dct2, idct2


def soft_threshold(c: np.ndarray, threshold: float) -> np.ndarray:
    return np.sign(c) * np.maximum(np.abs(c) - threshold, 0.0)


def ista_block(y: np.ndarray, phi_rows: np.ndarray, B: int, iters: int, threshold: float) -> np.ndarray:
    x = np.zeros(B * B)
    for _ in range(iters):
        x = project_block(x, y, phi_rows, 0.0)
        if threshold > 0.0:
            x = idct2(soft_threshold(dct2(x.reshape(B, B)), threshold)).reshape(-1)
    return x


def ista_reconstruct(Y: MeasurementSet, mm: MeasurementMatrix, iters: int = 200, threshold: float = 0.03) -> np.ndarray:
    """Reconstruct every block independently and tile the result into an H×W image.

    Works best with orthonormal-row matrices, where the unit projection step
    is exact.
    """
    if threshold < 0:
        raise ContractError("threshold must be non-negative")
    B = Y.config.B
    h, w = Y.grid
    vecs = [ista_block(yk, mm.phi[: len(yk)], B, iters, threshold) for yk in Y.y]
    return image_from_vectors(np.stack(vecs), h, w, B)
