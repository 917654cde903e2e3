"""Differentiable torch counterparts of the numpy warp, tight-frame and Beltrami code.

Tensors use ``(N, C, H, W)`` layout; displacement components are ``(N, H, W)``.
The numpy modules remain the reference; tests check these against them.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..quasiconformal import EPS_DENOM, MU_CLAMP
from ..tightframe import FilterBank, build_filter_bank


def warp(img: torch.Tensor, dx: torch.Tensor, dy: torch.Tensor) -> torch.Tensor:
    """Clamp-to-edge bilinear pull-back warp of ``img`` (N, C, H, W) by (N, H, W) offsets."""
    n, c, h, w = img.shape
    yy, xx = torch.meshgrid(
        torch.arange(h, dtype=img.dtype), torch.arange(w, dtype=img.dtype), indexing="ij"
    )
    x = torch.clamp(xx + dx, 0.0, w - 1.0)
    y = torch.clamp(yy + dy, 0.0, h - 1.0)
    x0 = torch.clamp(torch.floor(x.detach()), max=w - 2).long()
    y0 = torch.clamp(torch.floor(y.detach()), max=h - 2).long()
    fx = (x - x0).unsqueeze(1)
    fy = (y - y0).unsqueeze(1)
    flat = img.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(n, 1, h * w).expand(n, c, h * w)
        return torch.gather(flat, 2, idx).reshape(n, c, h, w)

    v00 = gather(y0, x0)
    v01 = gather(y0, x0 + 1)
    v10 = gather(y0 + 1, x0)
    v11 = gather(y0 + 1, x0 + 1)
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


class TightFrame(torch.nn.Module):
    """Fixed-weight tight-frame analysis as periodic 3x3 correlations."""

    def __init__(self, level: int = 1, bank: FilterBank | None = None, dtype=torch.float64):
        super().__init__()
        bank = bank or build_filter_bank()
        self.level = level
        pairs = bank.pairs
        k = torch.tensor(np.array([bank.kernels[pq] for pq in pairs]), dtype=dtype)
        self.register_buffer("lowpass", k[:1].unsqueeze(1))
        self.register_buffer("highpass", k[1:].unsqueeze(1))
        self.n_high = len(pairs) - 1

    def planes_per_channel(self) -> int:
        return 1 + self.level * self.n_high

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """(N, C, H, W) -> (N, C * planes_per_channel, H, W), channel-major."""
        n, c, h, w = img.shape
        cur = img.reshape(n * c, 1, h, w)
        highs = []
        for _ in range(self.level):
            padded = F.pad(cur, (1, 1, 1, 1), mode="circular")
            highs.append(F.conv2d(padded, self.highpass))
            cur = F.conv2d(padded, self.lowpass)
        out = torch.cat([cur] + highs, dim=1)
        return out.reshape(n, c * self.planes_per_channel(), h, w)


def _diff(a: torch.Tensor, dim: int) -> torch.Tensor:
    """Central differences inside, one-sided first order at both ends."""
    n = a.shape[dim]
    first = a.narrow(dim, 1, 1) - a.narrow(dim, 0, 1)
    last = a.narrow(dim, n - 1, 1) - a.narrow(dim, n - 2, 1)
    if n == 2:
        return torch.cat([first, last], dim=dim)
    mid = (a.narrow(dim, 2, n - 2) - a.narrow(dim, 0, n - 2)) / 2
    return torch.cat([first, mid, last], dim=dim)


def mu_squared(dx: torch.Tensor, dy: torch.Tensor, clamp: float = MU_CLAMP) -> torch.Tensor:
    """Per-pixel ``|mu|^2`` of ``id + (dx, dy)``; degenerate pixels read ``clamp**2``."""
    ux = 1 + _diff(dx, -1)
    uy = _diff(dx, -2)
    vx = _diff(dy, -1)
    vy = 1 + _diff(dy, -2)
    # f_z = ((ux + vy) + i (vx - uy)) / 2, f_zbar = ((ux - vy) + i (vx + uy)) / 2
    fz2 = ((ux + vy) ** 2 + (vx - uy) ** 2) / 4
    fzb2 = ((ux - vy) ** 2 + (vx + uy) ** 2) / 4
    degenerate = fz2 <= EPS_DENOM ** 2
    safe = torch.where(degenerate, torch.ones_like(fz2), fz2)
    return torch.where(degenerate, torch.full_like(fz2, clamp ** 2), fzb2 / safe)
