"""Masked image-quality metrics: SSIM, PSNR and SNR.

SSIM follows Wang et al. with a uniform square window, sample
(co)variances (``N / (N - 1)`` correction) and reflect boundary handling,
i.e. the conventions of ``skimage.metrics.structural_similarity`` with
``gaussian_weights=False``.  The SSIM map is computed on the whole image
and averaged over the mask pixels only.

PSNR and SNR return ``math.inf`` when the masked error is exactly zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import Image2D, as_array, as_mask

__all__ = ["MetricConfig", "ssim", "ssim_map", "psnr", "snr", "write_metric_rows"]


@dataclass(frozen=True)
class MetricConfig:
    ssim_window: int = 7
    K1: float = 0.01
    K2: float = 0.03
    data_range: float | None = None

    def __post_init__(self):
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd and >= 3")
        if self.K1 <= 0 or self.K2 <= 0:
            raise ValueError("K1 and K2 must be positive")
        if self.data_range is not None and self.data_range <= 0:
            raise ValueError("data_range must be positive")


DEFAULT = MetricConfig()


def _prepare(x, ref, mask):
    a, r, m = as_array(x), as_array(ref), as_mask(mask)
    if a.shape != r.shape or m.shape != r.shape:
        raise ValueError(f"shape mismatch: {a.shape}, {r.shape}, mask {m.shape}")
    if not m.any():
        raise ValueError("metric mask is empty")
    return a, r, m


def _data_range(ref, cfg: MetricConfig) -> float:
    if cfg.data_range is not None:
        return float(cfg.data_range)
    if isinstance(ref, Image2D):
        lo, hi = ref.value_range
        return hi - lo
    return 1.0


def ssim_map(x, ref, cfg: MetricConfig = DEFAULT, data_range: float | None = None) -> np.ndarray:
    a, r = as_array(x), as_array(ref)
    L = _data_range(ref, cfg) if data_range is None else data_range
    w = cfg.ssim_window
    np_ = w * w
    cov_norm = np_ / (np_ - 1.0)

    def filt(z):
        return ndimage.uniform_filter(z, size=w, mode="reflect")

    ux, uy = filt(a), filt(r)
    uxx, uyy, uxy = filt(a * a), filt(r * r), filt(a * r)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    c1 = (cfg.K1 * L) ** 2
    c2 = (cfg.K2 * L) ** 2
    num = (2.0 * ux * uy + c1) * (2.0 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return num / den


def ssim(x, ref, mask, cfg: MetricConfig = DEFAULT) -> float:
    """Mean SSIM over mask pixels; the data range comes from ``ref`` unless configured."""
    _prepare(x, ref, mask)
    return float(ssim_map(x, ref, cfg)[as_mask(mask)].mean())


def psnr(x, ref, mask, cfg: MetricConfig = DEFAULT) -> float:
    a, r, m = _prepare(x, ref, mask)
    mse = float(np.mean((a[m] - r[m]) ** 2))
    if mse == 0.0:
        return math.inf
    L = _data_range(ref, cfg)
    return 10.0 * math.log10(L * L / mse)


def snr(x, ref, mask) -> float:
    """``10 log10(sum ref^2 / sum (x - ref)^2)`` over the mask."""
    a, r, m = _prepare(x, ref, mask)
    signal = float(np.sum(r[m] ** 2))
    if signal == 0.0:
        raise ValueError("reference has zero energy inside the mask")
    err = float(np.sum((a[m] - r[m]) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / err)


def write_metric_rows(rows, path) -> Path:
    """CSV with columns image_id, views, method, ssim, psnr, snr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "views", "method", "ssim", "psnr", "snr"])
        for row in rows:
            w.writerow([row["image_id"], row["views"], row["method"], row["ssim"], row["psnr"], row["snr"]])
    return path
