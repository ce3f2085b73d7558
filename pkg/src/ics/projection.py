"""Measurement-consistency projection for single blocks and for multi-channel features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, DimensionError, Tensor, matmul, mul, pixel_shuffle, pixel_unshuffle, reciprocal
from .sampling import (
    MeasurementSet,
    PaddedMeasurements,
    image_block_rows,
    image_from_block_rows,
    phi_prefix,
)


def project_block(x: np.ndarray, y: np.ndarray, phi_rows: np.ndarray, alpha: float = 0.0) -> np.ndarray:
    """One gradient step toward {x : phi_rows @ x = y}, scaled by 1/(1 + alpha)."""
    if alpha <= -1.0:
        raise ContractError(f"alpha must exceed -1, got {alpha}")
    if phi_rows.shape[0] != len(y):
        raise DimensionError(f"{phi_rows.shape[0]} rows but {len(y)} measurements")
    return x + phi_rows.T @ (y - phi_rows @ x) / (1.0 + alpha)


@dataclass
class McpParams:
    """Per-channel update steps of one multi-channel projection at a pyramid level."""

    channels: int
    level: int
    alpha: Tensor = field(default=None)

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = Tensor(np.zeros(self.channels), requires_grad=True)
        if self.alpha.shape != (self.channels,):
            raise DimensionError(f"alpha must have shape ({self.channels},)")

    @property
    def upscale(self) -> int:
        return 2**self.level


def as_padded(Y) -> PaddedMeasurements:
    if isinstance(Y, PaddedMeasurements):
        return Y
    if isinstance(Y, MeasurementSet):
        return PaddedMeasurements.from_sets([Y])
    return PaddedMeasurements.from_sets(list(Y))


def mcp_forward(f: Tensor, Y, phi: Tensor, p: McpParams) -> Tensor:
    """Project every B×B block of every channel of the pixel-shuffled feature.

    ``f`` is C×H'×W' or N×C×H'×W' with H = r·H' the image height. Each block of
    each of the C/r² full-resolution channels is pulled toward its block's
    measurements with ``phi[:m_ij]`` and step 1/(1 + alpha_c); the result is
    pixel-unshuffled back to the input shape.
    """
    Y = as_padded(Y)
    squeeze = f.ndim == 3
    if squeeze:
        f = f.reshape((1,) + f.shape)
    n, c, hp, wp = f.shape
    r = p.upscale
    H, W = Y.image_shape
    if hp * r != H or wp * r != W:
        raise DimensionError(f"feature {hp}×{wp} at upscale {r} does not match image {H}×{W}")
    if c % (r * r):
        raise DimensionError(f"{c} channels not divisible by r²={r * r}")
    if c // (r * r) != p.channels:
        raise DimensionError(f"expected {p.channels * r * r} channels, got {c}")
    if Y.y.shape[0] != n:
        raise DimensionError(f"batch of {n} features but {Y.y.shape[0]} measurement sets")
    B = Y.B
    h, w = H // B, W // B
    x = image_block_rows(pixel_shuffle(f, r), B, keep_channels=True)  # N×hw×C'×B²
    phik = phi_prefix(phi, Y.width)
    mask = Y.mask[:, :, None, :]
    resid = Y.y.reshape(n, h * w, 1, Y.width) - mul(matmul(x, phik.T), mask)
    step = reciprocal(p.alpha + 1.0).reshape(p.channels, 1)
    out = x + mul(matmul(resid, phik), step)
    out = pixel_unshuffle(image_from_block_rows(out, h, w, B), r)
    return out.reshape(out.shape[1:]) if squeeze else out
