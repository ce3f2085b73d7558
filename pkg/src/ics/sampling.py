"""Block partitioning and scalable adaptive block sampling with one shared matrix.

All block bookkeeping uses raster order over the h×w block grid and row-major
vectorization inside each B×B block. The measurement matrix ``phi`` is only
ever used through row prefixes ``phi[:k]``, so measurements taken at a small
budget are a prefix of those taken at a larger one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    ContractError,
    DimensionError,
    Tensor,
    custom_op,
    matmul,
    mul,
    pixel_shuffle,
    pixel_unshuffle,
)

DEFAULT_BLOCK = 32


def initial_ratio(sr_t: float) -> float:
    """Initial sampling ratio: half the target up to 0.1, a third above it."""
    return sr_t / 2.0 if sr_t <= 0.1 else sr_t / 3.0


@dataclass(frozen=True)
class SamplingConfig:
    sr_t: float
    B: int = DEFAULT_BLOCK
    M: Optional[int] = None
    seed: int = 0
    sr_init: Optional[float] = None

    def __post_init__(self):
        if self.M is None:
            object.__setattr__(self, "M", self.B * self.B)
        if self.sr_init is None:
            object.__setattr__(self, "sr_init", initial_ratio(self.sr_t))
        self.validate()

    @property
    def n0(self) -> int:
        return int(np.floor(self.B * self.B * self.sr_init))

    def validate(self) -> None:
        if not 0.0 < self.sr_t <= 1.0:
            raise ContractError(f"sr_t must lie in (0, 1], got {self.sr_t}")
        if not 0.0 < self.sr_init < self.sr_t:
            raise ContractError(f"need 0 < sr_init < sr_t, got sr_init={self.sr_init}")
        if self.M > self.B * self.B:
            raise ContractError(f"M={self.M} exceeds B²={self.B * self.B}")
        if not 1 <= self.n0 < self.M:
            raise ContractError(f"initial measurement count n0={self.n0} outside [1, M)")


@dataclass
class MeasurementMatrix:
    """The shared sampling matrix ``phi`` (M×B²) and its linear mapper ``psi`` (B²×M)."""

    phi: np.ndarray
    psi: np.ndarray

    @property
    def M(self) -> int:
        return self.phi.shape[0]

    @property
    def B(self) -> int:
        return int(round(np.sqrt(self.phi.shape[1])))


def init_measurement_matrix(cfg: SamplingConfig, mode: str = "gaussian") -> MeasurementMatrix:
    return random_measurement_matrix(cfg.B, cfg.M, cfg.seed, mode)


def random_measurement_matrix(B: int, M: Optional[int] = None, seed: int = 0, mode: str = "gaussian") -> MeasurementMatrix:
    """Draw ``phi`` from a seeded PCG64 stream; ``psi`` starts as ``phi.T``.

    ``gaussian`` gives i.i.d. N(0, 1/B²) entries. ``orthonormal`` runs
    Gram-Schmidt (via QR) over M Gaussian rows so that phi @ phi.T = I.
    """
    n = B * B
    M = n if M is None else M
    if M > n:
        raise ContractError(f"M={M} exceeds B²={n}")
    rng = np.random.default_rng(seed)
    g = rng.normal(0.0, 1.0 / B, size=(M, n))
    if mode == "gaussian":
        phi = g
    elif mode == "orthonormal":
        q, r = np.linalg.qr(g.T)
        # fix signs so the result is the Gram-Schmidt basis of the rows of g
        phi = (q * np.sign(np.diag(r))).T
    else:
        raise ValueError(f"unknown measurement matrix mode {mode!r}")
    phi = np.ascontiguousarray(phi)
    return MeasurementMatrix(phi=phi, psi=np.ascontiguousarray(phi.T))


# blocks ---------------------------------------------------------------------


def partition_blocks(image: np.ndarray, B: int) -> np.ndarray:
    """Split an H×W image into an (H/B)×(W/B)×B×B grid of blocks."""
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape
    if H % B or W % B:
        raise DimensionError(f"image {H}×{W} is not divisible into {B}×{B} blocks")
    return image.reshape(H // B, B, W // B, B).transpose(0, 2, 1, 3).copy()


def assemble_blocks(blocks: np.ndarray) -> np.ndarray:
    h, w, B, _ = blocks.shape
    return blocks.transpose(0, 2, 1, 3).reshape(h * B, w * B).copy()


def vectorize_block(block: np.ndarray) -> np.ndarray:
    return np.asarray(block, dtype=np.float64).reshape(-1).copy()


def devectorize_block(vec: np.ndarray, B: int) -> np.ndarray:
    return np.asarray(vec, dtype=np.float64).reshape(B, B).copy()


def block_vectors(image: np.ndarray, B: int) -> np.ndarray:
    """(h·w)×B² matrix of vectorized blocks in raster order."""
    g = partition_blocks(image, B)
    h, w = g.shape[:2]
    return g.reshape(h * w, B * B)


def image_from_vectors(vecs: np.ndarray, h: int, w: int, B: int) -> np.ndarray:
    return assemble_blocks(np.asarray(vecs).reshape(h, w, B, B))


def row_dots(phi_rows: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """phi_rows @ vec, with each entry reduced independently of the row count.

    BLAS kernels change their summation order with the matrix shape, which
    would make phi[:k1] @ x differ from (phi[:k2] @ x)[:k1] in the last bit.
    """
    return np.multiply(phi_rows, vec).sum(axis=1)


def sample_block(phi_rows: np.ndarray, block: np.ndarray) -> np.ndarray:
    if phi_rows.shape[0] < 1:
        raise ContractError("need at least one measurement row")
    return row_dots(phi_rows, vectorize_block(block))


# measurement sets -----------------------------------------------------------


@dataclass
class MeasurementSet:
    """Ragged per-block measurements of one image.

    ``y[k]`` holds the ``m.flat[k]`` measurements of block k (raster order).
    """

    y: list[np.ndarray]
    m: np.ndarray
    config: SamplingConfig
    image_shape: tuple[int, int]

    @property
    def grid(self) -> tuple[int, int]:
        return self.m.shape

    @property
    def total(self) -> int:
        return int(self.m.sum())

    def padded(self, width: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
        """Zero-padded (h·w)×width measurements and the matching 0/1 row mask."""
        width = self.config.M if width is None else width
        n = self.m.size
        ypad = np.zeros((n, width))
        for k, yk in enumerate(self.y):
            ypad[k, : len(yk)] = yk
        return ypad, row_mask(self.m.reshape(-1), width)

    def initial(self) -> list[np.ndarray]:
        n0 = self.config.n0
        return [yk[:n0].copy() for yk in self.y]


def row_mask(m: np.ndarray, width: int) -> np.ndarray:
    """mask[k, r] = 1 where row r is among the first m[k] rows."""
    return (np.arange(width)[None, :] < np.asarray(m).reshape(-1, 1)).astype(np.float64)


def initial_sample(image: np.ndarray, mm: MeasurementMatrix, cfg: SamplingConfig) -> np.ndarray:
    """(h, w, n0) initial measurements, each block sampled with ``phi[:n0]``."""
    vecs = block_vectors(image, cfg.B)
    h, w = image.shape[0] // cfg.B, image.shape[1] // cfg.B
    rows = mm.phi[: cfg.n0]
    return np.stack([row_dots(rows, v) for v in vecs]).reshape(h, w, cfg.n0)


def adaptive_sample(
    image: np.ndarray,
    mm: MeasurementMatrix,
    alloc,
    initial: np.ndarray,
    cfg: Optional[SamplingConfig] = None,
) -> MeasurementSet:
    """Extend each block's initial measurements with rows ``n0 .. m_ij-1`` of ``phi``.

    ``alloc`` is an AllocationMap or an integer h×w array of counts.
    """
    m = np.asarray(getattr(alloc, "m", alloc), dtype=np.int64)
    n0 = initial.shape[-1]
    if cfg is None:
        cfg = SamplingConfig(sr_t=getattr(alloc, "sr_t"), B=mm.B, M=mm.M)
    if m.shape != initial.shape[:2]:
        raise DimensionError(f"allocation grid {m.shape} does not match {initial.shape[:2]}")
    if m.min() < n0 or m.max() > mm.M:
        raise ContractError(f"allocation must lie in [{n0}, {mm.M}], got [{m.min()}, {m.max()}]")
    vecs = block_vectors(image, cfg.B)
    ys = []
    for k, (mk, y0) in enumerate(zip(m.reshape(-1), initial.reshape(-1, n0))):
        extra = row_dots(mm.phi[n0:mk], vecs[k])
        ys.append(np.concatenate([y0, extra]))
    return MeasurementSet(y=ys, m=m.copy(), config=cfg, image_shape=tuple(image.shape))


def measure_full(image: np.ndarray, mm: MeasurementMatrix, m: np.ndarray, cfg: SamplingConfig) -> MeasurementSet:
    """Sample every block with ``phi[:m_ij]`` directly (no initial/adaptive split)."""
    m = np.asarray(m, dtype=np.int64)
    vecs = block_vectors(image, cfg.B)
    ys = [row_dots(mm.phi[:mk], v) for mk, v in zip(m.reshape(-1), vecs)]
    return MeasurementSet(y=ys, m=m.copy(), config=cfg, image_shape=tuple(image.shape))


# differentiable batch form --------------------------------------------------


@dataclass
class PaddedMeasurements:
    """Measurements of a batch of N images as a zero-padded tensor.

    ``y`` is N×(h·w)×width with entries beyond each block's count set to zero;
    ``mask`` marks the valid rows. ``m`` is N×h×w.
    """

    y: Tensor
    mask: np.ndarray
    m: np.ndarray
    B: int
    n0: int
    image_shape: tuple[int, int]
    configs: list = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.mask.shape[-1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.m.shape[1:]

    @classmethod
    def from_sets(cls, sets: Sequence[MeasurementSet], width: Optional[int] = None) -> "PaddedMeasurements":
        if isinstance(sets, MeasurementSet):
            sets = [sets]
        if width is None:
            width = int(max(s.m.max() for s in sets))
        ys, masks = zip(*(s.padded(width) for s in sets))
        return cls(
            y=Tensor(np.stack(ys)),
            mask=np.stack(masks),
            m=np.stack([s.m for s in sets]),
            B=sets[0].config.B,
            n0=sets[0].config.n0,
            image_shape=tuple(sets[0].image_shape),
            configs=[s.config for s in sets],
        )

    @classmethod
    def measure(cls, images: Tensor, phi: Tensor, m: np.ndarray, B: int, n0: int) -> "PaddedMeasurements":
        """Differentiable sampling of an N×1×H×W batch with prefixes of ``phi``."""
        m = np.asarray(m, dtype=np.int64)
        width = int(m.max())
        n = images.shape[0]
        mask = row_mask(m.reshape(-1), width).reshape(n, -1, width)
        y = mul(matmul(image_block_rows(images, B), phi_prefix(phi, width).T), mask)
        return cls(y=y, mask=mask, m=m, B=B, n0=n0, image_shape=tuple(images.shape[-2:]))

    def initial_mask(self) -> np.ndarray:
        return self.mask * (np.arange(self.width) < self.n0)


def phi_prefix(phi: Tensor, k: int) -> Tensor:
    if k == phi.shape[0]:
        return phi
    shape = phi.shape

    def backward(g):
        full = np.zeros(shape)
        full[:k] = g
        return (full,)

    return custom_op(phi.data[:k], (phi,), backward)


def image_block_rows(images: Tensor, B: int, keep_channels: bool = False) -> Tensor:
    """N×C×H×W -> N×(h·w)×C×B², or N×(h·w)×B² when C = 1 and channels are dropped."""
    n, c, H, W = images.shape
    h, w = H // B, W // B
    u = pixel_unshuffle(images, B).reshape(n, c, B * B, h * w)
    if c == 1 and not keep_channels:
        return u.reshape(n, B * B, h * w).transpose(0, 2, 1)
    return u.transpose(0, 3, 1, 2)


def image_from_block_rows(rows: Tensor, h: int, w: int, B: int) -> Tensor:
    """Inverse of :func:`image_block_rows` for both layouts."""
    if rows.ndim == 3:
        n = rows.shape[0]
        u = rows.transpose(0, 2, 1).reshape(n, B * B, h, w)
    else:
        n, _, c, _ = rows.shape
        u = rows.transpose(0, 2, 3, 1).reshape(n, c * B * B, h, w)
    return pixel_shuffle(u, B)
