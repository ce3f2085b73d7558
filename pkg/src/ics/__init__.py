"""Adaptive block compressive sensing and a projection-based window transformer for reconstruction."""

from .autodiff import ContractError, DimensionError, Tensor, backward, grad_check
from .ista import ista_reconstruct
from .metrics import psnr, ssim
from .model import ModelConfig, UformerICS, init_params, initialize_image, uformer_forward
from .sampling import (
    MeasurementMatrix,
    MeasurementSet,
    SamplingConfig,
    adaptive_sample,
    init_measurement_matrix,
    initial_sample,
    random_measurement_matrix,
)
from .sparsity import adaptive_measure, allocate, estimate_sparsity, low_quality_estimate

__all__ = [
    "ContractError",
    "DimensionError",
    "MeasurementMatrix",
    "MeasurementSet",
    "ModelConfig",
    "SamplingConfig",
    "Tensor",
    "UformerICS",
    "adaptive_measure",
    "adaptive_sample",
    "allocate",
    "backward",
    "estimate_sparsity",
    "grad_check",
    "init_measurement_matrix",
    "init_params",
    "initial_sample",
    "initialize_image",
    "ista_reconstruct",
    "low_quality_estimate",
    "psnr",
    "random_measurement_matrix",
    "ssim",
    "uformer_forward",
]
