"""Synthetic turbulence: smooth random warps, Gaussian blur and additive noise.

Each frame is degraded as ``blur(clean o f_t) + n_t`` with an independent
random field per frame. Everything is a pure function of the config seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .imaging import (
    DimensionError,
    DisplacementField,
    as_image,
    load_field,
    load_image,
    save_field,
    save_image,
    warp,
)

PRESETS = {
    # amplitude, correlation_length, blur_sigma, noise_sigma
    "mild": (2.0, 16.0, 0.5, 0.005),
    "medium": (4.0, 12.0, 1.0, 0.01),
    "severe": (7.0, 8.0, 1.5, 0.02),
}


@dataclass(frozen=True)
class TurbulenceConfig:
    preset: str = "custom"
    amplitude: float = 2.0
    correlation_length: float = 16.0
    blur_sigma: float = 0.5
    noise_sigma: float = 0.005
    T: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.correlation_length < 2:
            raise ValueError("correlation_length must be >= 2")
        if not 0.0 <= self.noise_sigma <= 0.1:
            raise ValueError("noise_sigma must lie in [0, 0.1]")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @classmethod
    def from_preset(cls, name: str, T: int = 10, seed: int = 0) -> "TurbulenceConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        amp, corr, blur, noise = PRESETS[name]
        return cls(name, amp, corr, blur, noise, T, seed)

    def with_(self, **kw) -> "TurbulenceConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def _derived_seed(seed: int, stream: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, stream, index]).generate_state(1)[0])


def field_seed(seed: int, frame_index: int) -> int:
    return _derived_seed(seed, 0, frame_index)


def noise_seed(seed: int, frame_index: int) -> int:
    return _derived_seed(seed, 1, frame_index)


def random_smooth_field(config: TurbulenceConfig, frame_index: int, shape=(64, 64)) -> DisplacementField:
    """Gaussian-smoothed white noise, rescaled to peak magnitude ``amplitude``."""
    h, w = shape
    if config.amplitude == 0:
        return DisplacementField.zeros(h, w)
    rng = np.random.default_rng(field_seed(config.seed, frame_index))
    sigma = config.correlation_length / 2.0
    dx = gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    dy = gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    peak = np.max(np.hypot(dx, dy))
    scale = config.amplitude / peak
    return DisplacementField(dx * scale, dy * scale)


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Periodic Gaussian blur truncated at 3 sigma; identity for ``sigma == 0``."""
    img = as_image(img)
    if sigma == 0:
        return img.copy()
    return gaussian_filter(img, sigma=(sigma, sigma, 0), mode="wrap", truncate=3.0)


def apply_distortion(clean, field: DisplacementField, blur_sigma: float, noise_sigma: float, seed: int) -> np.ndarray:
    """Warp, blur, add seeded Gaussian noise, clip to ``[0, 1]``."""
    clean = as_image(clean)
    if field.shape != clean.shape[:2]:
        raise DimensionError(f"field shape {field.shape} does not match image {clean.shape[:2]}")
    out = gaussian_blur(warp(clean, field), blur_sigma)
    if noise_sigma > 0:
        out = out + noise_sigma * np.random.default_rng(seed).standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0)


@dataclass
class GroundTruthBundle:
    clean: np.ndarray
    frames: list
    fields: list
    config: TurbulenceConfig

    def mean_field_magnitude(self) -> float:
        return float(np.mean([f.magnitude().mean() for f in self.fields]))

    def save(self, directory) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        save_image(self.clean, out / "clean.png")
        for t, (frame, fld) in enumerate(zip(self.frames, self.fields)):
            save_image(frame, out / f"frame_{t:03d}.png")
            save_field(fld, out / f"field_{t:03d}.fld")
        echo = self.config.to_dict()
        echo["noise_seeds"] = [noise_seed(self.config.seed, t) for t in range(self.config.T)]
        (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "GroundTruthBundle":
        d = Path(directory)
        echo = json.loads((d / "config.json").read_text())
        echo.pop("noise_seeds", None)
        config = TurbulenceConfig(**echo)
        frames = [load_image(d / f"frame_{t:03d}.png") for t in range(config.T)]
        fields = [load_field(d / f"field_{t:03d}.fld") for t in range(config.T)]
        return cls(load_image(d / "clean.png"), frames, fields, config)


def generate(clean, config: TurbulenceConfig) -> GroundTruthBundle:
    clean = as_image(clean)
    shape = clean.shape[:2]
    fields, frames = [], []
    for t in range(config.T):
        fld = random_smooth_field(config, t, shape)
        fields.append(fld)
        frames.append(apply_distortion(clean, fld, config.blur_sigma, config.noise_sigma, noise_seed(config.seed, t)))
    return GroundTruthBundle(clean, frames, fields, config)


def default_scene(size: int = 64, seed: int = 0) -> np.ndarray:
    """Grayscale test scene: a tiled pattern with grout lines, a few discs and
    a diagonal grating, softened by a 1 px Gaussian.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    tile = max(size // 4, 4)
    shades = rng.uniform(0.25, 0.75, size=(size // tile + 1, size // tile + 1))
    img = shades[(yy // tile).astype(int), (xx // tile).astype(int)]
    grout = (np.mod(xx, tile) < 2) | (np.mod(yy, tile) < 2)
    img = np.where(grout, 0.1, img)
    for _ in range(3):
        cx, cy = rng.uniform(0.2, 0.8, size=2) * size
        rad = rng.uniform(0.08, 0.16) * size
        disc = (xx - cx) ** 2 + (yy - cy) ** 2 < rad ** 2
        img = np.where(disc, rng.uniform(0.6, 0.95), img)
    img = img + 0.08 * np.sin(2 * np.pi * (xx + yy) / 9.0)
    img = gaussian_filter(img, 1.0, mode="nearest")
    return as_image(np.clip(img, 0.0, 1.0))
