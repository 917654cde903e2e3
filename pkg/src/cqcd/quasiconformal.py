"""Beltrami coefficients of displacement-induced maps, the BC regularizer,
fixed-point map inversion and bijectivity diagnostics.

The map is ``f(x, y) = (x + dx) + i (y + dy)``. Derivatives use central
differences in the interior and one-sided first-order differences on the
border (grid spacing 1 px).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imaging import DimensionError, DisplacementField, sample_plane

EPS_DENOM = 1e-8
MU_CLAMP = 10.0


@dataclass(frozen=True)
class BeltramiField:
    mu: np.ndarray          # complex; 0 at degenerate pixels
    degenerate: np.ndarray  # bool mask, |f_z| <= EPS_DENOM

    @property
    def shape(self):
        return self.mu.shape

    def magnitude(self, clamp: float | None = None) -> np.ndarray:
        """``|mu|``; degenerate pixels read ``clamp`` (``inf`` when None)."""
        mag = np.abs(self.mu)
        return np.where(self.degenerate, math.inf if clamp is None else clamp, mag)


@dataclass(frozen=True)
class MapDiagnostics:
    sup_mu: float
    dilation_K: float
    min_jacobian: float
    fold_count: int
    degenerate_count: int

    @property
    def bounded(self) -> bool:
        return self.sup_mu < 1.0

    def to_dict(self) -> dict:
        """JSON-safe record; unbounded quantities become ``None``."""
        def fin(v):
            return v if math.isfinite(v) else None
        return {
            "sup_mu": fin(self.sup_mu),
            "dilation_K": fin(self.dilation_K),
            "min_jacobian": self.min_jacobian,
            "fold_count": self.fold_count,
            "degenerate_count": self.degenerate_count,
            "bounded": self.bounded,
        }


def map_derivatives(field: DisplacementField):
    """Return ``(f_x, f_y)`` as complex arrays."""
    h, w = field.shape
    if h < 2 or w < 2:
        raise DimensionError("field must be at least 2x2 for finite differences")
    ddx_dy, ddx_dx = np.gradient(field.dx, edge_order=1)
    ddy_dy, ddy_dx = np.gradient(field.dy, edge_order=1)
    fx = (1.0 + ddx_dx) + 1j * ddy_dx
    fy = ddx_dy + 1j * (1.0 + ddy_dy)
    return fx, fy


def beltrami(field: DisplacementField) -> BeltramiField:
    fx, fy = map_derivatives(field)
    fz = 0.5 * (fx - 1j * fy)
    fzbar = 0.5 * (fx + 1j * fy)
    degenerate = np.abs(fz) <= EPS_DENOM
    safe = np.where(degenerate, 1.0, fz)
    mu = np.where(degenerate, 0.0, fzbar / safe)
    return BeltramiField(mu, degenerate)


def jacobian_determinant(field: DisplacementField) -> np.ndarray:
    fx, fy = map_derivatives(field)
    return fx.real * fy.imag - fy.real * fx.imag


def mu_squared_mean(field: DisplacementField, clamp: float = MU_CLAMP) -> float:
    return float(np.mean(beltrami(field).magnitude(clamp) ** 2))


def bc_loss(fields, inverse_fields, clamp: float = MU_CLAMP) -> float:
    """``(1 / 4T) * sum_t (mean|mu(f_t)|^2 + mean|mu(f_t^-1)|^2)``."""
    fields = list(fields)
    inverse_fields = list(inverse_fields)
    if len(fields) != len(inverse_fields):
        raise ValueError(f"{len(fields)} fields but {len(inverse_fields)} inverses")
    if not fields:
        raise ValueError("bc_loss needs at least one field")
    total = sum(mu_squared_mean(f, clamp) + mu_squared_mean(g, clamp) for f, g in zip(fields, inverse_fields))
    return total / (4 * len(fields))


@dataclass(frozen=True)
class InversionResult:
    field: DisplacementField
    converged: bool
    iterations: int
    residual: float  # max |f(f^-1(y)) - y| in pixels


def compose_residual(field: DisplacementField, inverse: DisplacementField) -> np.ndarray:
    """Per-pixel ``|g(y) + d(y + g(y))|``, the round-trip error of ``f(f^-1(y))``."""
    h, w = field.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x = xx + inverse.dx
    y = yy + inverse.dy
    rx = inverse.dx + sample_plane(field.dx, x, y)
    ry = inverse.dy + sample_plane(field.dy, x, y)
    return np.hypot(rx, ry)


def invert_field(field: DisplacementField, tol: float = 1e-3, max_iter: int = 50) -> InversionResult:
    """Invert ``f = id + d`` by the fixed point ``g <- -d(y + g(y))``.

    Starts from ``g = -d``. Converges when ``d`` is a contraction; otherwise the
    last iterate is returned with ``converged=False``.
    """
    h, w = field.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    gx = -field.dx
    gy = -field.dy
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        nx = -sample_plane(field.dx, xx + gx, yy + gy)
        ny = -sample_plane(field.dy, xx + gx, yy + gy)
        update = float(np.max(np.hypot(nx - gx, ny - gy)))
        gx, gy = nx, ny
        if update < tol:
            converged = True
            break
    inverse = DisplacementField(gx, gy)
    residual = float(np.max(compose_residual(field, inverse)))
    return InversionResult(inverse, converged, it, residual)


def dilation(sup_mu: float) -> float:
    return (1.0 + sup_mu) / (1.0 - sup_mu) if sup_mu < 1.0 else math.inf


def diagnostics(field: DisplacementField) -> MapDiagnostics:
    """Sup of ``|mu|``, maximal dilation and fold statistics of ``id + d``.

    A degenerate pixel (``f_z`` ~ 0) makes ``sup_mu`` unbounded.
    """
    bc = beltrami(field)
    det = jacobian_determinant(field)
    n_degenerate = int(bc.degenerate.sum())
    if n_degenerate:
        sup_mu = math.inf
    else:
        sup_mu = float(np.max(np.abs(bc.mu)))
    return MapDiagnostics(
        sup_mu=sup_mu,
        dilation_K=dilation(sup_mu),
        min_jacobian=float(det.min()),
        fold_count=int(np.count_nonzero(det <= 0)),
        degenerate_count=n_degenerate,
    )
