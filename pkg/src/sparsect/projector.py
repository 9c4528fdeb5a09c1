"""Parallel-beam Radon transform and view subsampling.

Geometry conventions: pixel ``(row, col)`` has its centre at
``x = col - c``, ``y = c - row`` with ``c = (n - 1) / 2``.  View ``i`` has
angle ``i * pi / n_views``; detector bin ``k`` sits at offset
``s = (k - (n_detectors - 1) / 2) * spacing`` along ``(cos t, sin t)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .core import FormatError, as_array, read_f64, write_f64

__all__ = [
    "ScanGeometry",
    "Sinogram",
    "RAY_STEP",
    "radon_forward",
    "subsample_views",
    "save_sinogram",
    "load_sinogram",
]

RAY_STEP = 0.5


@dataclass(frozen=True)
class ScanGeometry:
    n_views: int
    n_detectors: int
    detector_spacing: float = 1.0

    def __post_init__(self):
        if self.n_views < 1 or self.n_detectors < 1:
            raise ValueError("n_views and n_detectors must be positive")
        if self.detector_spacing <= 0:
            raise ValueError("detector_spacing must be positive")

    @classmethod
    def for_image(cls, n: int, n_views: int) -> "ScanGeometry":
        """Width-matched detector with unit spacing."""
        return cls(int(n_views), int(n))

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_views) * (np.pi / self.n_views)

    @property
    def offsets(self) -> np.ndarray:
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2.0) * self.detector_spacing


@dataclass(frozen=True)
class Sinogram:
    geometry: ScanGeometry
    data: np.ndarray  # (n_views, n_detectors)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        g = self.geometry
        if arr.shape != (g.n_views, g.n_detectors):
            raise ValueError(f"sinogram shape {arr.shape} does not match geometry {(g.n_views, g.n_detectors)}")
        object.__setattr__(self, "data", arr)

    def __mul__(self, k: float) -> "Sinogram":
        return Sinogram(self.geometry, self.data * k)

    __rmul__ = __mul__


@numba.njit(cache=True)
def _bilinear(img, row, col):
    n_r, n_c = img.shape
    r0 = np.floor(row)
    c0 = np.floor(col)
    fr = row - r0
    fc = col - c0
    i0 = int(r0)
    j0 = int(c0)
    acc = 0.0
    for di in range(2):
        i = i0 + di
        if i < 0 or i >= n_r:
            continue
        wr = fr if di == 1 else 1.0 - fr
        for dj in range(2):
            j = j0 + dj
            if j < 0 or j >= n_c:
                continue
            wc = fc if dj == 1 else 1.0 - fc
            acc += wr * wc * img[i, j]
    return acc


@numba.njit(cache=True)
def _radon_kernel(img, angles, offsets, step):
    n = img.shape[0]
    c = (n - 1) / 2.0
    # symmetric sample positions covering the circumscribed circle
    n_steps = 2 * int(np.ceil((np.sqrt(2.0) * n / 2.0 + 1.0) / step)) + 1
    half = (n_steps - 1) / 2.0 * step
    out = np.zeros((angles.shape[0], offsets.shape[0]))
    for v in range(angles.shape[0]):
        ct = np.cos(angles[v])
        st = np.sin(angles[v])
        for k in range(offsets.shape[0]):
            s = offsets[k]
            acc = 0.0
            for m in range(n_steps):
                t = -half + m * step
                x = s * ct - t * st
                y = s * st + t * ct
                acc += _bilinear(img, c - y, x + c)
            out[v, k] = acc * step
    return out


def radon_forward(image, geometry: ScanGeometry) -> Sinogram:
    """Line integrals along every (angle, offset) ray by 0.5 px bilinear sampling."""
    arr = as_array(image)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"radon_forward needs a square image, got shape {arr.shape}")
    data = _radon_kernel(np.ascontiguousarray(arr), geometry.angles, geometry.offsets, RAY_STEP)
    return Sinogram(geometry, data)


def subsample_views(sino: Sinogram, k: int) -> Sinogram:
    """Keep every ``n_views // k``-th view starting at view 0."""
    g = sino.geometry
    if k < 1 or g.n_views % k != 0:
        raise ValueError(f"{k} views do not evenly divide {g.n_views}")
    stride = g.n_views // k
    geom = ScanGeometry(k, g.n_detectors, g.detector_spacing)
    return Sinogram(geom, sino.data[::stride].copy())


def save_sinogram(sino: Sinogram, path) -> None:
    p = Path(path)
    if p.suffix in (".f64", ".json"):
        p = p.with_suffix("")
    p.parent.mkdir(parents=True, exist_ok=True)
    write_f64(p.with_name(p.name + ".f64"), sino.data)
    g = sino.geometry
    p.with_name(p.name + ".json").write_text(
        json.dumps({"n_views": g.n_views, "n_detectors": g.n_detectors, "spacing": g.detector_spacing})
    )


def load_sinogram(path) -> Sinogram:
    p = Path(path)
    if p.suffix in (".f64", ".json"):
        p = p.with_suffix("")
    meta = json.loads(p.with_name(p.name + ".json").read_text())
    try:
        g = ScanGeometry(int(meta["n_views"]), int(meta["n_detectors"]), float(meta["spacing"]))
    except KeyError as exc:
        raise FormatError(f"sinogram sidecar missing key {exc}") from None
    data = read_f64(p.with_name(p.name + ".f64"), g.n_views * g.n_detectors)
    return Sinogram(g, data.reshape(g.n_views, g.n_detectors))
