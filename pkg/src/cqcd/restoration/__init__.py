"""Circular deformation estimation, blur removal and their training loop."""

from ..imaging import field_error
from .losses import LossComponents, loss_dist, loss_rec, median_minimizer, total_losses
from .models import BlurRemover, ConvEstimator, GridEstimator, squash
from .pipeline import (
    NumericalFailure,
    RestorationConfig,
    GradientSample,
    RestorationState,
    gradient_check,
    gradient_samples,
    optimize,
)

__all__ = [
    "BlurRemover",
    "ConvEstimator",
    "GridEstimator",
    "LossComponents",
    "NumericalFailure",
    "RestorationConfig",
    "RestorationState",
    "GradientSample",
    "field_error",
    "gradient_check",
    "gradient_samples",
    "loss_dist",
    "loss_rec",
    "median_minimizer",
    "optimize",
    "squash",
    "total_losses",
]
