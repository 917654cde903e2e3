"""Fidelity losses and the two training objectives.

L1 norms are pixel means so the regularization weight does not depend on
the image size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..imaging import DimensionError, as_image, as_sequence


def _mean_l1_to_frames(image, frames) -> float:
    img = as_image(image)
    seq = as_sequence(frames)
    if seq.shape[1:] != img.shape:
        raise DimensionError(f"image {img.shape} does not match frames {seq.shape[1:]}")
    return float(np.mean([np.mean(np.abs(img - f)) for f in seq]))


def loss_rec(restored, warped) -> float:
    """``(1/T) sum_t mean|I* - I^_t|``."""
    return _mean_l1_to_frames(restored, warped)


def loss_dist(originals, redistorted) -> float:
    """``(1/T) sum_t mean|I~_t - I-_t|``."""
    a = as_sequence(originals)
    b = as_sequence(redistorted)
    if a.shape != b.shape:
        raise DimensionError(f"sequence shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean([np.mean(np.abs(x - y)) for x, y in zip(a, b)]))


@dataclass(frozen=True)
class LossComponents:
    rec: float
    dist: float
    bc: float
    lam: float

    @property
    def de(self) -> float:
        return self.dist + self.rec + self.lam * self.bc

    @property
    def br(self) -> float:
        return self.dist + self.rec


def total_losses(rec: float, dist: float, bc: float, lam: float = 0.1):
    """Return ``(L_DE, L_BR, components)``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    comp = LossComponents(rec, dist, bc, lam)
    return comp.de, comp.br, comp


def median_minimizer(warped) -> np.ndarray:
    """Pixel-wise median of the warped frames, the minimizer of ``loss_rec``."""
    return np.median(as_sequence(warped), axis=0)
