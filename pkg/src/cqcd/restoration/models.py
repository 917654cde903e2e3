"""Deformation estimator backends and the pixel-wise blur remover."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn


def squash(raw: torch.Tensor, scale: float) -> torch.Tensor:
    """Componentwise saturation into ``(-scale, scale)``; slope 1 at the origin."""
    return scale * torch.tanh(raw / scale)


def upsample_matrix(n_pixels: int, spacing: int, dtype=torch.float64) -> torch.Tensor:
    """Linear interpolation from control nodes at ``k * spacing`` to every pixel."""
    n_nodes = math.ceil((n_pixels - 1) / spacing) + 1
    m = np.zeros((n_pixels, n_nodes))
    for i in range(n_pixels):
        pos = i / spacing
        k = min(int(math.floor(pos)), n_nodes - 2) if n_nodes > 1 else 0
        frac = pos - k
        m[i, k] += 1 - frac
        if n_nodes > 1:
            m[i, k + 1] += frac
    return torch.tensor(m, dtype=dtype)


class GridEstimator(nn.Module):
    """One control grid per frame, bilinearly upsampled to a dense field.

    Ignores its feature input; the parameters themselves are the deformation.
    With ``center=True`` the raw values are made zero-mean across frames
    before squashing, which pins down the otherwise free common drift.
    """

    backend = "grid"

    def __init__(self, n_frames: int, height: int, width: int, spacing: int = 8,
                 displacement_scale: float = 10.0, center: bool = False, dtype=torch.float64):
        super().__init__()
        self.center = center
        self.spacing = spacing
        self.displacement_scale = displacement_scale
        self.register_buffer("uy", upsample_matrix(height, spacing, dtype))
        self.register_buffer("ux", upsample_matrix(width, spacing, dtype))
        self.raw = nn.Parameter(
            torch.zeros(n_frames, 2, self.uy.shape[1], self.ux.shape[1], dtype=dtype)
        )

    def forward(self, features=None):
        raw = self.raw - self.raw.mean(dim=0, keepdim=True) if self.center else self.raw
        nodes = squash(raw, self.displacement_scale)
        dense = self.uy @ nodes @ self.ux.T
        return dense[:, 0], dense[:, 1]


class ConvEstimator(nn.Module):
    """Small shared-weight encoder-decoder mapping per-frame features to a field.

    The last layer starts at zero so a fresh estimator emits identity maps.
    """

    backend = "conv"

    def __init__(self, in_planes: int, width: int = 16, displacement_scale: float = 10.0,
                 center: bool = False, generator: torch.Generator | None = None, dtype=torch.float64):
        super().__init__()
        self.center = center
        self.displacement_scale = displacement_scale
        self.enc1 = nn.Conv2d(in_planes, width, 3, padding=1, padding_mode="replicate", dtype=dtype)
        self.enc2 = nn.Conv2d(width, 2 * width, 3, padding=1, padding_mode="replicate", dtype=dtype)
        self.dec1 = nn.Conv2d(3 * width, width, 3, padding=1, padding_mode="replicate", dtype=dtype)
        self.head = nn.Conv2d(width, 2, 3, padding=1, padding_mode="replicate", dtype=dtype)
        for conv in (self.enc1, self.enc2, self.dec1):
            _glorot_(conv.weight, generator)
            nn.init.zeros_(conv.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, features: torch.Tensor):
        h, w = features.shape[-2:]
        e1 = torch.relu(self.enc1(features))
        e2 = torch.relu(self.enc2(nn.functional.avg_pool2d(e1, 2, ceil_mode=True)))
        up = nn.functional.interpolate(e2, size=(h, w), mode="bilinear", align_corners=False)
        d1 = torch.relu(self.dec1(torch.cat([e1, up], dim=1)))
        raw = self.head(d1)
        if self.center:
            raw = raw - raw.mean(dim=0, keepdim=True)
        out = squash(raw, self.displacement_scale)
        return out[:, 0], out[:, 1]


def _glorot_(weight: torch.Tensor, generator: torch.Generator | None):
    fan_out, fan_in = weight.shape[0], weight.shape[1]
    receptive = weight[0, 0].numel()
    k = math.sqrt(6.0 / (fan_in * receptive + fan_out * receptive))
    with torch.no_grad():
        weight.uniform_(-k, k, generator=generator)


class BlurRemover(nn.Module):
    """Stack of 1x1 convolutions: in -> 256 -> 256 -> channels.

    Hidden layers are conv, ReLU, batch norm; the output goes through a
    sigmoid. ``linear=True`` drops the ReLU, the normalization and the sigmoid.
    """

    def __init__(self, in_planes: int, channels: int = 1, hidden: int = 256, linear: bool = False,
                 generator: torch.Generator | None = None, dtype=torch.float64):
        super().__init__()
        self.in_planes = in_planes
        self.linear = linear
        self.widths = [in_planes, hidden, hidden, channels]
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, 1, dtype=dtype) for a, b in zip(self.widths[:-1], self.widths[1:])
        )
        self.norms = nn.ModuleList(
            nn.BatchNorm2d(hidden, dtype=dtype) for _ in range(2)
        ) if not linear else nn.ModuleList()
        for conv in self.convs:
            _glorot_(conv.weight, generator)
            nn.init.zeros_(conv.bias)

    def forward(self, planes: torch.Tensor) -> torch.Tensor:
        """(N, in_planes, H, W) -> (N, channels, H, W)."""
        if planes.shape[1] != self.in_planes:
            raise ValueError(f"remover expects {self.in_planes} planes, got {planes.shape[1]}")
        x = planes
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1 and not self.linear:
                x = self.norms[i](torch.relu(x))
        return x if self.linear else torch.sigmoid(x)
