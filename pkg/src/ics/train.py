"""Three-part reconstruction loss, Adam, and a small deterministic trainer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import DimensionError, Tensor, as_tensor, backward, mul, zero_grad
from .model import ModelConfig, init_params, uformer_forward
from .sampling import (
    MeasurementMatrix,
    PaddedMeasurements,
    SamplingConfig,
    image_block_rows,
    image_from_block_rows,
    phi_prefix,
)
from .projection import as_padded
from .sparsity import allocation_for

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def _batch_size(x: Tensor) -> int:
    return 1 if x.ndim == 2 else x.shape[0]


def loss_l1(xhat, x) -> Tensor:
    """Sum of squared reconstruction errors divided by 2N (not by the pixel count)."""
    xhat, x = as_tensor(xhat), as_tensor(x)
    if xhat.shape != x.shape:
        raise DimensionError(f"shape mismatch {xhat.shape} vs {x.shape}")
    d = xhat - x
    return (d * d).sum() * (1.0 / (2 * _batch_size(x)))


def loss_l3(x0hat, x) -> Tensor:
    """Same form as :func:`loss_l1`, applied to the low-quality initial estimate."""
    return loss_l1(x0hat, x)


def remeasure(xhat: Tensor, Y: PaddedMeasurements, phi: Tensor) -> Tensor:
    """Sample an N×1×H×W reconstruction with the same per-block row prefixes as ``Y``."""
    rows = image_block_rows(xhat, Y.B)
    return mul(rows @ phi_prefix(phi, Y.width).T, Y.mask)


def loss_l2(Y, xhat, phi) -> Tensor:
    """Measurement-domain error of the reconstruction, divided by 2N."""
    Y = as_padded(Y)
    if isinstance(phi, MeasurementMatrix):
        phi = Tensor(phi.phi)
    xhat = as_tensor(xhat)
    if xhat.ndim == 2:
        xhat = xhat.reshape((1, 1) + xhat.shape)
    d = Y.y - remeasure(xhat, Y, phi)
    return (d * d).sum() * (1.0 / (2 * xhat.shape[0]))


def total_loss(l1, l2, l3, w: LossWeights = LossWeights()):
    return l1 + l2 * w.lambda1 + l3 * w.lambda2


def low_quality_tensor(Y: PaddedMeasurements, psi: Tensor) -> Tensor:
    """Differentiable N×1×H×W estimate from the first n0 measurements of each block."""
    h, w = Y.grid
    y0 = mul(Y.y, Y.initial_mask())
    rows = y0 @ phi_prefix(psi.T, Y.width)
    return image_from_block_rows(rows, h, w, Y.B)


# optimisation ---------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """Bias-corrected Adam update of every parameter holding a gradient, in place."""
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# training -------------------------------------------------------------------


@dataclass
class LossTerms:
    l1: float
    l2: float
    l3: float
    total: float


def batch_losses(
    images: np.ndarray,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    sr_t: float,
    estimator: str = "sm",
    weights: LossWeights = LossWeights(),
    allocations: Optional[np.ndarray] = None,
):
    """Forward pass over an N×H×W batch. Returns (total, l1, l2, l3, xhat, x0) tensors.

    Allocations (N×h×w) are computed from the current matrices unless given;
    they are integer-valued and carry no gradient.
    """
    images = np.asarray(images, dtype=np.float64)
    n, H, W = images.shape
    sc = SamplingConfig(sr_t=sr_t, B=cfg.B)
    if allocations is None:
        mm = MeasurementMatrix(params["phi"].data, params["psi"].data)
        allocations = np.stack([allocation_for(img, mm, sc, estimator).m for img in images])
    X = Tensor(images[:, None])
    Y = PaddedMeasurements.measure(X, params["phi"], allocations, cfg.B, sc.n0)
    xhat, x0 = uformer_forward(Y, params, cfg, return_init=True)
    l1 = loss_l1(xhat, X)
    l2 = loss_l2(Y, xhat, params["phi"])
    l3 = loss_l3(low_quality_tensor(Y, params["psi"]), X)
    return total_loss(l1, l2, l3, weights), l1, l2, l3, xhat, x0


@dataclass
class TrainResult:
    params: dict
    trace: list  # LossTerms per step, measured before that step's update
    state: OptimizerState


def train_toy(
    images: np.ndarray,
    cfg: ModelConfig,
    steps: int = 200,
    seed: int = 0,
    sr_t: float = 0.25,
    lr: float = 1e-3,
    batch_size: int = 4,
    estimator: str = "sm",
    weights: LossWeights = LossWeights(),
    params: Optional[dict] = None,
) -> TrainResult:
    """Sample, reconstruct, score and update for ``steps`` mini-batches.

    Mini-batches are drawn without replacement from a seeded permutation of
    ``images`` that is refreshed every pass.
    """
    images = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(cfg, seed)
    state = OptimizerState(lr=lr)
    trace: list[LossTerms] = []
    order: list[int] = []
    for step in range(steps):
        if len(order) < batch_size:
            order += list(rng.permutation(len(images)))
        idx, order = order[:batch_size], order[batch_size:]
        total, l1, l2, l3, _, _ = batch_losses(images[idx], params, cfg, sr_t, estimator, weights)
        zero_grad(params.values())
        backward(total)
        adam_step(params, state)
        trace.append(LossTerms(l1.item(), l2.item(), l3.item(), total.item()))
        log.debug("step %d total %.6f", step, trace[-1].total)
    return TrainResult(params=params, trace=trace, state=state)


def evaluate(
    images: np.ndarray, params: dict, cfg: ModelConfig, sr_t: float, estimator: str = "sm", batch_size: int = 4
) -> tuple[LossTerms, np.ndarray, np.ndarray]:
    """Dataset-level loss terms plus reconstructions and initializations (N×H×W each)."""
    images = np.asarray(images, dtype=np.float64)
    sums = np.zeros(4)
    recon, init = [], []
    for s in range(0, len(images), batch_size):
        chunk = images[s : s + batch_size]
        total, l1, l2, l3, xhat, x0 = batch_losses(chunk, params, cfg, sr_t, estimator)
        # the losses are divided by the chunk size; undo that before pooling
        sums += len(chunk) * np.array([l1.item(), l2.item(), l3.item(), total.item()])
        recon.append(xhat.data[:, 0])
        init.append(x0.data[:, 0])
    l1, l2, l3, t = sums / len(images)
    return LossTerms(l1, l2, l3, t), np.concatenate(recon), np.concatenate(init)
