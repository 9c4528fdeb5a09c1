"""Filtered back projection with the band-limited Ram-Lak filter."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

from .core import Image2D
from .fft import fft, ifft, next_pow2
from .projector import Sinogram

__all__ = ["RampFilter", "ramlak_kernel", "filter_views", "backproject", "reconstruct"]


def ramlak_kernel(offsets: np.ndarray) -> np.ndarray:
    """Spatial band-limited ramp for unit spacing: 1/4 at 0, 0 at even, -1/(pi n)^2 at odd."""
    d = np.abs(np.asarray(offsets, dtype=np.int64))
    h = np.zeros(d.shape)
    h[d == 0] = 0.25
    odd = d % 2 == 1
    h[odd] = -1.0 / (np.pi * d[odd]) ** 2
    return h


@dataclass(frozen=True)
class RampFilter:
    padded_length: int
    response: np.ndarray

    @classmethod
    def for_detectors(cls, n_detectors: int) -> "RampFilter":
        return _ramp_filter(int(n_detectors))


@lru_cache(maxsize=32)
def _ramp_filter(n_detectors: int) -> RampFilter:
    p = next_pow2(2 * n_detectors)
    # circular layout: index m holds lag m for m <= p/2, lag m - p above
    lags = np.arange(p)
    lags = np.where(lags <= p // 2, lags, lags - p)
    response = fft(ramlak_kernel(lags)).real
    response.setflags(write=False)
    return RampFilter(p, response)


def filter_views(sino: Sinogram) -> Sinogram:
    """Convolve every view with the Ram-Lak kernel (zero-padded FFT, truncated back)."""
    g = sino.geometry
    filt = RampFilter.for_detectors(g.n_detectors)
    padded = np.zeros((g.n_views, filt.padded_length))
    padded[:, : g.n_detectors] = sino.data
    out = ifft(fft(padded) * filt.response).real[:, : g.n_detectors]
    # kernel samples scale as 1/spacing^2, the convolution sum as spacing
    return Sinogram(g, out / g.detector_spacing)


@numba.njit(cache=True)
def _backproject_kernel(filtered, angles, spacing, n):
    n_views, n_det = filtered.shape
    c = (n - 1) / 2.0
    det_c = (n_det - 1) / 2.0
    out = np.zeros((n, n))
    cos_t = np.cos(angles)
    sin_t = np.sin(angles)
    for i in range(n):
        y = c - i
        for j in range(n):
            x = j - c
            acc = 0.0
            for v in range(n_views):
                pos = (x * cos_t[v] + y * sin_t[v]) / spacing + det_c
                k0 = int(np.floor(pos))
                f = pos - k0
                if 0 <= k0 < n_det:
                    acc += (1.0 - f) * filtered[v, k0]
                if 0 <= k0 + 1 < n_det:
                    acc += f * filtered[v, k0 + 1]
            out[i, j] = acc
    return out


def backproject(sino: Sinogram, n: int) -> Image2D:
    """Smear each (filtered) view back across an ``n x n`` grid, weighted by pi / n_views."""
    g = sino.geometry
    img = _backproject_kernel(sino.data, g.angles, float(g.detector_spacing), int(n))
    return Image2D(img * (np.pi / g.n_views), (0.0, 1.0))


def reconstruct(sino: Sinogram, n: int) -> Image2D:
    return backproject(filter_views(sino), n)
