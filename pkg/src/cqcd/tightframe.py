"""Undecimated 2-D tight-frame (framelet) transform built from a 3-tap UEP filter bank.

Analysis applies each 2-D kernel by periodic correlation (the CNN sense of
"convolution"); synthesis applies the flipped kernel, i.e. the exact adjoint
under periodic boundaries. Levels iterate the same low-pass kernel without
dilation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .imaging import DimensionError, as_image

SQRT6 = np.sqrt(6.0)
SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class FilterBank:
    """1-D filters ``m_0..m_r`` and their 2-D tensor products.

    ``kernels[(p, q)]`` is ``W_{p,q}`` with entry ``[i, j] = m_q[i] * m_p[j]``,
    so ``p`` selects the horizontal (column) filter and ``q`` the vertical one.
    """

    filters: tuple
    kernels: dict = field(repr=False)

    @property
    def r(self) -> int:
        return len(self.filters) - 1

    @property
    def pairs(self) -> list:
        """Row-major ``(p, q)`` ordering, ``(0, 0)`` first."""
        n = len(self.filters)
        return [(p, q) for p in range(n) for q in range(n)]

    def adjoint(self, p: int, q: int) -> np.ndarray:
        return self.kernels[(p, q)][::-1, ::-1]

    def uep_residual(self, n_samples: int = 1024) -> float:
        """``sup |sum_p |m_p^(xi)|^2 - 1|`` over ``n_samples`` points of ``[0, 2*pi)``."""
        return uep_residual(self.filters, n_samples)


def frequency_response(m: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Fourier transform of a centred filter, ``sum_k m[k] exp(-i k xi)``, k = -s..s."""
    m = np.asarray(m, dtype=np.float64)
    k = np.arange(len(m)) - (len(m) - 1) // 2
    return np.exp(-1j * np.outer(xi, k)) @ m


def uep_residual(filters, n_samples: int = 1024) -> float:
    xi = np.linspace(0.0, 2 * np.pi, n_samples, endpoint=False)
    total = sum(np.abs(frequency_response(m, xi)) ** 2 for m in filters)
    return float(np.max(np.abs(total - 1.0)))


def build_filter_bank() -> FilterBank:
    """The 3-tap bank: mean low-pass, first- and second-difference high-passes."""
    m0 = np.array([1.0, 1.0, 1.0]) / 3.0
    m1 = SQRT6 / 6.0 * np.array([1.0, 0.0, -1.0])
    m2 = 3.0 * SQRT2 / 18.0 * np.array([1.0, -2.0, 1.0])
    filters = (m0, m1, m2)
    kernels = {}
    for p, q in itertools.product(range(3), repeat=2):
        k = np.kron(filters[p][None, :], filters[q][:, None])
        k.flags.writeable = False
        kernels[(p, q)] = k
    for m in filters:
        m.flags.writeable = False
    return FilterBank(filters, kernels)


def correlate_periodic(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """``out[y, x] = sum_{i,j} k[i, j] * plane[y + i - c, x + j - c]`` with wrap-around."""
    kh, kw = kernel.shape
    cy, cx = kh // 2, kw // 2
    out = np.zeros_like(plane, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            w = kernel[i, j]
            if w != 0.0:
                out += w * np.roll(plane, (cy - i, cx - j), axis=(0, 1))
    return out


def convolve_periodic(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`correlate_periodic`."""
    return correlate_periodic(plane, kernel[::-1, ::-1])


@dataclass
class TightFramePyramid:
    level: int
    lowpass: np.ndarray
    highpass: dict  # (l, p, q) -> plane, l = 1..level

    @property
    def shape(self):
        return self.lowpass.shape

    def subband_count(self) -> int:
        return 1 + len(self.highpass)

    def planes(self) -> list:
        """``C^L`` first, then ``H^l_{p,q}`` by ascending ``l`` then row-major ``(p, q)``."""
        return [self.lowpass] + [self.highpass[key] for key in sorted(self.highpass)]


def _as_plane(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[2] != 1:
            raise DimensionError("decompose expects a single-channel image; split channels first")
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D plane, got shape {arr.shape}")
    return arr


def decompose(img, level: int = 1, bank: FilterBank | None = None) -> TightFramePyramid:
    """Multi-level undecimated decomposition of a single-channel image."""
    if level < 1:
        raise ValueError(f"level must be >= 1, got {level}")
    bank = bank or build_filter_bank()
    plane = _as_plane(img)
    support = max(k.shape[0] for k in bank.kernels.values())
    if min(plane.shape) < support:
        raise DimensionError(f"image {plane.shape} is smaller than the kernel support {support}")
    highpass = {}
    current = plane
    for lev in range(1, level + 1):
        for p, q in bank.pairs[1:]:
            highpass[(lev, p, q)] = correlate_periodic(current, bank.kernels[(p, q)])
        current = correlate_periodic(current, bank.kernels[(0, 0)])
    return TightFramePyramid(level, current, highpass)


def reconstruct(pyr: TightFramePyramid, bank: FilterBank | None = None) -> np.ndarray:
    """Invert :func:`decompose` level by level:
    ``C^{l-1} = W~00 C^l + sum_{(p,q) != 0} W~pq H^l_{p,q}``.
    """
    bank = bank or build_filter_bank()
    expected = {(lev, p, q) for lev in range(1, pyr.level + 1) for p, q in bank.pairs[1:]}
    if set(pyr.highpass) != expected:
        raise DimensionError("pyramid subbands do not match the filter bank and level")
    shape = pyr.lowpass.shape
    if any(h.shape != shape for h in pyr.highpass.values()):
        raise DimensionError("pyramid subbands have inconsistent shapes")
    current = pyr.lowpass
    for lev in range(pyr.level, 0, -1):
        acc = convolve_periodic(current, bank.kernels[(0, 0)])
        for p, q in bank.pairs[1:]:
            acc = acc + convolve_periodic(pyr.highpass[(lev, p, q)], bank.kernels[(p, q)])
        current = acc
    return current


def feature_stack(img_or_seq, level: int = 1, bank: FilterBank | None = None) -> list:
    """Flatten tight-frame subbands of an image (or each image of a sequence).

    Channels are decomposed independently and concatenated channel-major; for
    a sequence, frames are concatenated in order.
    """
    bank = bank or build_filter_bank()
    arr = np.asarray(img_or_seq, dtype=np.float64)
    if arr.ndim == 4:
        return [p for frame in arr for p in feature_stack(frame, level, bank)]
    img = as_image(arr)
    planes = []
    for ch in range(img.shape[2]):
        planes.extend(decompose(img[:, :, ch], level, bank).planes())
    return planes


def subband_count(level: int, r: int = 2) -> int:
    return level * ((r + 1) ** 2 - 1) + 1
