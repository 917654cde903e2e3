"""Image containers, bilinear sampling/warping, quality metrics and file I/O.

Images are float64 numpy arrays of shape ``(H, W, C)`` with ``C`` in {1, 3}
and intensities in ``[0, 1]``. Coordinates are ``(x, y) = (column, row)``
with the origin at the centre of the top-left pixel. Warping is pull-back:
the output pixel at ``p`` reads the input at ``p + d(p)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage
from scipy.signal import convolve2d

MIN_SIZE = 8
FIELD_MAGIC = b"CQCDFLD1"

LUMA = np.array([0.299, 0.587, 0.114])


class DimensionError(ValueError):
    """Raised when array shapes do not agree."""


class ImageFormatError(ValueError):
    """Raised for unsupported or corrupt image/field files."""


def as_image(arr, check_size: bool = False) -> np.ndarray:
    """Return ``arr`` as a float64 ``(H, W, C)`` image.

    2-D input is promoted to a single channel.
    """
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DimensionError(f"expected (H, W) or (H, W, 1|3) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if check_size and (img.shape[0] < MIN_SIZE or img.shape[1] < MIN_SIZE):
        raise DimensionError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {img.shape[:2]}")
    return img


def as_sequence(frames, check_size: bool = False) -> np.ndarray:
    """Stack frames into a ``(T, H, W, C)`` array, checking uniform shape."""
    if isinstance(frames, np.ndarray) and frames.ndim == 4:
        seq = np.asarray(frames, dtype=np.float64)
        for f in seq:
            as_image(f, check_size)
        if len(seq) == 0:
            raise ValueError("empty frame sequence")
        return seq
    imgs = [as_image(f, check_size) for f in frames]
    if not imgs:
        raise ValueError("empty frame sequence")
    shape = imgs[0].shape
    for i, f in enumerate(imgs):
        if f.shape != shape:
            raise DimensionError(f"frame {i} has shape {f.shape}, expected {shape}")
    return np.stack(imgs)


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel offsets ``(dx, dy)`` in pixels; the induced map is f(p) = p + d(p)."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = np.array(self.dx, dtype=np.float64)
        dy = np.array(self.dy, dtype=np.float64)
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise DimensionError(f"dx/dy must be equal 2-D arrays, got {dx.shape} and {dy.shape}")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise ValueError("displacement field contains non-finite values")
        dx.flags.writeable = False
        dy.flags.writeable = False
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @classmethod
    def zeros(cls, height: int, width: int) -> "DisplacementField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)

    def __neg__(self) -> "DisplacementField":
        return DisplacementField(-self.dx, -self.dy)

    def save(self, path) -> None:
        save_field(self, path)

    @classmethod
    def load(cls, path) -> "DisplacementField":
        return load_field(path)


def _clamped_corners(h: int, w: int, x, y):
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2) if w > 1 else np.zeros_like(x, dtype=np.intp)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2) if h > 1 else np.zeros_like(y, dtype=np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, x1, y0, y1, x - x0, y - y0


def sample_plane(plane: np.ndarray, x, y) -> np.ndarray:
    """Bilinearly sample a 2-D array at (arrays of) subpixel coordinates, clamp-to-edge."""
    h, w = plane.shape
    x0, x1, y0, y1, fx, fy = _clamped_corners(h, w, np.asarray(x, np.float64), np.asarray(y, np.float64))
    top = plane[y0, x0] * (1 - fx) + plane[y0, x1] * fx
    bot = plane[y1, x0] * (1 - fx) + plane[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def bilinear_sample(img, x: float, y: float, channel: int = 0) -> float:
    """Bilinear interpolation of one channel at ``(x, y)``.

    Coordinates outside the image are clamped to the border row/column first,
    so the result is defined for every finite input.
    """
    img = as_image(img)
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError("sample coordinates must be finite")
    return float(sample_plane(img[:, :, channel], x, y))


def warp(img, field: DisplacementField) -> np.ndarray:
    """Pull-back warp: ``out(x, y) = img(x + dx, y + dy)`` for every channel."""
    img = as_image(img)
    h, w, c = img.shape
    if field.shape != (h, w):
        raise DimensionError(f"field shape {field.shape} does not match image {(h, w)}")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x = xx + field.dx
    y = yy + field.dy
    out = np.empty_like(img)
    for ch in range(c):
        out[:, :, ch] = sample_plane(img[:, :, ch], x, y)
    return out


def _check_same(a, b):
    a = as_image(a)
    b = as_image(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for peak 1.0; ``math.inf`` when identical.

    Computed per channel and averaged.
    """
    a, b = _check_same(a, b)
    vals = []
    for ch in range(a.shape[2]):
        mse = float(np.mean((a[:, :, ch] - b[:, :, ch]) ** 2))
        vals.append(math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse))
    if any(math.isinf(v) for v in vals):
        return math.inf if all(math.isinf(v) for v in vals) else float(np.mean([v for v in vals if not math.isinf(v)]))
    return float(np.mean(vals))


def to_gray(img) -> np.ndarray:
    img = as_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ LUMA


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity on luma, Gaussian window, unit dynamic range."""
    a, b = _check_same(a, b)
    if a.shape[0] < win_size or a.shape[1] < win_size:
        raise DimensionError(f"image {a.shape[:2]} smaller than the {win_size}x{win_size} window")
    x = to_gray(a)
    y = to_gray(b)
    win = gaussian_window(win_size, sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def filt(z):
        return convolve2d(z, win, mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def average_frames(frames) -> np.ndarray:
    """Pixel-wise mean of a frame sequence."""
    seq = as_sequence(frames)
    return seq.mean(axis=0)


# --- file I/O --------------------------------------------------------------

def _read_pnm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"truncated PNM header in {path}")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported PNM type {magic!r} in {path}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"corrupt PNM header in {path}") from exc
    if not (0 < maxval < 65536) or w <= 0 or h <= 0:
        raise ImageFormatError(f"corrupt PNM header in {path}")
    c = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * c
    raw = data[pos:pos + n * dtype.itemsize]
    if len(raw) != n * dtype.itemsize:
        raise ImageFormatError(f"truncated PNM pixel data in {path}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(h, w, c)
    return arr.astype(np.float64) / maxval


def _write_pnm(img: np.ndarray, path: Path, bits: int) -> None:
    h, w, c = img.shape
    maxval = 255 if bits == 8 else 65535
    q = np.round(np.clip(img, 0.0, 1.0) * maxval)
    arr = q.astype(">u2" if bits == 16 else "u1")
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(arr.tobytes())


def load_image(path) -> np.ndarray:
    """Load PNG (8-bit gray/RGB, 16-bit gray) or binary PGM/PPM into ``[0, 1]``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        return _read_pnm(path)
    if suffix != ".png":
        raise ImageFormatError(f"unsupported image format {suffix!r}")
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif mode == "RGB":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif mode in ("RGBA", "P", "LA", "1"):
                target = "RGB" if mode in ("RGBA", "P") else "L"
                arr = np.asarray(im.convert(target), dtype=np.float64) / 255.0
            else:
                raise ImageFormatError(f"unsupported PNG mode {mode!r}")
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    return as_image(arr)


def save_image(img, path, bits: int = 8) -> None:
    """Quantize to ``bits`` (8 or 16; 16 only for grayscale PNG) and write."""
    img = as_image(img)
    path = Path(path)
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        _write_pnm(img, path, bits)
        return
    if suffix != ".png":
        raise ImageFormatError(f"unsupported image format {suffix!r}")
    clipped = np.clip(img, 0.0, 1.0)
    if bits == 16:
        if img.shape[2] != 1:
            raise ImageFormatError("16-bit PNG output is grayscale only")
        arr = np.round(clipped[:, :, 0] * 65535).astype(np.uint16)
        PILImage.fromarray(arr).save(path)
        return
    arr = np.round(clipped * 255).astype(np.uint8)
    if arr.shape[2] == 1:
        PILImage.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        PILImage.fromarray(arr, mode="RGB").save(path)


def save_field(field: DisplacementField, path) -> None:
    """Write the little-endian binary field format (magic, u32 H, u32 W, dx plane, dy plane)."""
    h, w = field.shape
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(field.dx.astype("<f4").tobytes())
        fh.write(field.dy.astype("<f4").tobytes())


def load_field(path) -> DisplacementField:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16 or data[:8] != FIELD_MAGIC:
        raise ImageFormatError(f"{path} is not a displacement field file")
    h, w = struct.unpack("<II", data[8:16])
    n = h * w
    if len(data) != 16 + 8 * n:
        raise ImageFormatError(f"{path}: expected {16 + 8 * n} bytes, found {len(data)}")
    planes = np.frombuffer(data[16:], dtype="<f4").astype(np.float64)
    return DisplacementField(planes[:n].reshape(h, w), planes[n:].reshape(h, w))


def field_error(estimated: DisplacementField, reference: DisplacementField) -> tuple[float, float]:
    """Mean and max endpoint error between two fields."""
    if estimated.shape != reference.shape:
        raise DimensionError(f"field shapes differ: {estimated.shape} vs {reference.shape}")
    epe = np.hypot(estimated.dx - reference.dx, estimated.dy - reference.dy)
    return float(epe.mean()), float(epe.max())


def frame_paths(directory, pattern: str = "frame_*.png") -> Sequence[Path]:
    return sorted(Path(directory).glob(pattern))
