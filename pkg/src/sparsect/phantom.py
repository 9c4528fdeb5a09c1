"""Synthetic head phantoms with hemorrhage-like lesions.

Images are rendered from a table of additive ellipses in normalised
``[-1, 1]^2`` coordinates (x to the right, y up; pixel centres on a
symmetric grid).  The standard Shepp-Logan table is used, scaled by
:data:`INTENSITY_SCALE` so the brain sits near 0.25 and the skull rim
at 0.5.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import Image2D, Mask2D, Rng, fisher_yates_shuffle, save_raw

__all__ = [
    "Ellipse",
    "LabeledSample",
    "PlacementError",
    "SHEPP_LOGAN",
    "INTENSITY_SCALE",
    "render_ellipses",
    "ellipse_value_at",
    "shepp_logan",
    "head_sample",
    "add_lesion",
    "make_dataset",
    "write_manifest",
]

INTENSITY_SCALE = 0.25
SKULL_EROSION_PX = 2


class PlacementError(RuntimeError):
    """No admissible lesion position was found."""


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float  # radians, counter-clockwise
    intensity: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("ellipse semi-axes must be positive")

    def contains(self, x, y):
        c, s = np.cos(self.angle), np.sin(self.angle)
        dx, dy = x - self.cx, y - self.cy
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0

    def transformed(self, scale: float, rotation: float) -> "Ellipse":
        """Scale about the origin then rotate the whole ellipse by ``rotation``."""
        c, s = np.cos(rotation), np.sin(rotation)
        cx, cy = scale * self.cx, scale * self.cy
        return Ellipse(
            c * cx - s * cy,
            s * cx + c * cy,
            scale * self.a,
            scale * self.b,
            self.angle + rotation,
            self.intensity,
        )


def _deg(d):
    return np.deg2rad(d)


# Kak & Slaney, "Principles of Computerized Tomographic Imaging", Table 3.1.
SHEPP_LOGAN: tuple[Ellipse, ...] = tuple(
    Ellipse(cx, cy, a, b, _deg(phi), INTENSITY_SCALE * rho)
    for cx, cy, a, b, phi, rho in [
        (0.0, 0.0, 0.69, 0.92, 0, 2.0),
        (0.0, -0.0184, 0.6624, 0.874, 0, -0.98),
        (0.22, 0.0, 0.11, 0.31, -18, -0.02),
        (-0.22, 0.0, 0.16, 0.41, 18, -0.02),
        (0.0, 0.35, 0.21, 0.25, 0, 0.01),
        (0.0, 0.1, 0.046, 0.046, 0, 0.01),
        (0.0, -0.1, 0.046, 0.046, 0, 0.01),
        (-0.08, -0.605, 0.046, 0.023, 0, 0.01),
        (0.0, -0.605, 0.023, 0.023, 0, 0.01),
        (0.06, -0.605, 0.023, 0.046, 0, 0.01),
    ]
)
HEAD_INTERIOR = 1  # index of the brain ellipse in the table


def pixel_grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalised coordinates of pixel centres, ``(x, y)`` each ``(n, n)``."""
    c = (np.arange(n) - (n - 1) / 2.0) * (2.0 / n)
    x = np.broadcast_to(c[None, :], (n, n))
    y = np.broadcast_to(-c[:, None], (n, n))
    return x, y


def render_ellipses(ellipses, n: int) -> np.ndarray:
    x, y = pixel_grid(n)
    img = np.zeros((n, n))
    for e in ellipses:
        img[e.contains(x, y)] += e.intensity
    return img


def ellipse_value_at(ellipses, x: float, y: float) -> float:
    """Analytic phantom value at a point (sum over containing ellipses, clamped)."""
    total = 0.0
    for e in ellipses:
        if e.contains(x, y):
            total += e.intensity
    return min(max(total, 0.0), 1.0)


def shepp_logan(n: int) -> Image2D:
    """Standard 10-ellipse Shepp-Logan phantom on an ``n x n`` grid, clamped to [0, 1]."""
    if n < 16:
        raise ValueError(f"phantom size must be >= 16, got {n}")
    return Image2D(np.clip(render_ellipses(SHEPP_LOGAN, n), 0.0, 1.0), (0.0, 1.0))


def intracranial_mask(ellipses, n: int, erosion: int = SKULL_EROSION_PX) -> np.ndarray:
    x, y = pixel_grid(n)
    inside = ellipses[HEAD_INTERIOR].contains(x, y)
    if erosion > 0:
        inside = ndimage.binary_erosion(inside, iterations=erosion)
    return inside


@dataclass(frozen=True)
class LabeledSample:
    image: Image2D
    lesion_mask: Mask2D
    skull_mask: Mask2D
    label: bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lesion = self.lesion_mask.data
        if self.label != bool(lesion.any()):
            raise ValueError("label must equal whether the lesion mask is non-empty")
        if np.any(lesion & ~self.skull_mask.data):
            raise ValueError("lesion mask must lie inside the skull mask")


def head_sample(n: int, scale: float = 1.0, rotation: float = 0.0, seed: int | None = None) -> LabeledSample:
    """Lesion-free phantom with its intracranial mask."""
    ellipses = [e.transformed(scale, rotation) for e in SHEPP_LOGAN]
    img = np.clip(render_ellipses(ellipses, n), 0.0, 1.0)
    skull = intracranial_mask(ellipses, n)
    return LabeledSample(
        Image2D(img, (0.0, 1.0)),
        Mask2D(np.zeros((n, n), dtype=bool)),
        Mask2D(skull),
        False,
        {"seed": seed, "scale": scale, "rotation": rotation, "lesion": None},
    )


def add_lesion(sample: LabeledSample, rng: Rng, contrast: float, radius_range: tuple[float, float]) -> LabeledSample:
    """Insert one elliptical blob of additive intensity ``contrast`` inside the skull mask.

    Semi-axes are drawn uniformly from ``radius_range`` (pixels), orientation
    uniformly, and the centre uniformly over skull pixels; a draw is kept
    only if every blob pixel lies in the skull mask.
    """
    if contrast <= 0:
        raise ValueError("lesion contrast must be positive")
    rmin, rmax = float(radius_range[0]), float(radius_range[1])
    if not 0 < rmin <= rmax:
        raise ValueError(f"invalid radius range {radius_range}")
    skull = sample.skull_mask.data
    h, w = skull.shape
    rows, cols = np.nonzero(skull)
    if rows.size == 0:
        raise PlacementError("empty skull mask")
    ii, jj = np.mgrid[0:h, 0:w]
    for _ in range(100):
        a, b = rng.uniform(rmin, rmax, size=2)
        angle = rng.uniform(0.0, np.pi)
        k = rng.integers(rows.size)
        ci, cj = float(rows[k]), float(cols[k])
        c, s = np.cos(angle), np.sin(angle)
        du, dv = jj - cj, ii - ci
        blob = ((du * c + dv * s) / a) ** 2 + ((-du * s + dv * c) / b) ** 2 <= 1.0
        if blob.any() and not np.any(blob & ~skull):
            break
    else:
        raise PlacementError(f"could not place a lesion with radii {radius_range} inside the skull mask")
    img = np.clip(sample.image.data + contrast * blob, 0.0, 1.0)
    lesion = sample.lesion_mask.data | blob
    meta = dict(sample.meta)
    meta["lesion"] = {
        "center_row": ci,
        "center_col": cj,
        "a": float(a),
        "b": float(b),
        "angle": float(angle),
        "contrast": float(contrast),
    }
    return replace(
        sample,
        image=sample.image.with_data(img),
        lesion_mask=Mask2D(lesion),
        label=True,
        meta=meta,
    )


def make_dataset(
    n_samples: int,
    lesion_fraction: float,
    n: int,
    rng: Rng,
    contrast: float | tuple[float, float] = (0.05, 0.1),
    radius_range: tuple[float, float] | None = None,
    scale_jitter: float = 0.05,
    rotation_jitter: float = 0.1,
) -> list[LabeledSample]:
    """Phantom dataset with exactly ``round(n_samples * lesion_fraction)`` positives.

    Every sample gets its own derived seed (kept in ``meta["seed"]``) so any
    sample can be regenerated alone.  ``contrast`` is either fixed or a
    ``(lo, hi)`` range sampled per lesion.
    """
    if not 0.0 <= lesion_fraction <= 1.0:
        raise ValueError("lesion_fraction must lie in [0, 1]")
    if radius_range is None:
        radius_range = (n / 32.0, n / 16.0)
    n_pos = int(round(n_samples * lesion_fraction))
    labels = fisher_yates_shuffle([True] * n_pos + [False] * (n_samples - n_pos), rng)
    seeds = rng.random_u64(n_samples)
    out = []
    for positive, seed in zip(labels, seeds):
        out.append(
            _generate_one(int(seed), n, positive, contrast, radius_range, scale_jitter, rotation_jitter)
        )
    return out


def _generate_one(seed, n, positive, contrast, radius_range, scale_jitter, rotation_jitter) -> LabeledSample:
    r = Rng(seed)
    scale = 1.0 + r.uniform(-scale_jitter, scale_jitter)
    rotation = r.uniform(-rotation_jitter, rotation_jitter)
    sample = head_sample(n, scale, rotation, seed=seed)
    if positive:
        if np.isscalar(contrast):
            c = float(contrast)
        else:
            c = r.uniform(float(contrast[0]), float(contrast[1]))
        sample = add_lesion(sample, r, c, radius_range)
    return sample


def write_manifest(samples, directory, prefix: str = "sample") -> Path:
    """Save images and masks as raw files and a JSON manifest listing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"{prefix}_{i:05d}"
        save_raw(s.image, directory / stem)
        save_raw(Image2D(s.lesion_mask.data.astype(float)), directory / f"{stem}_lesion")
        save_raw(Image2D(s.skull_mask.data.astype(float)), directory / f"{stem}_skull")
        entries.append(
            {
                "id": stem,
                "image": f"{stem}.f64",
                "lesion_mask": f"{stem}_lesion.f64",
                "skull_mask": f"{stem}_skull.f64",
                "label": bool(s.label),
                "seed": s.meta.get("seed"),
            }
        )
    path = directory / "manifest.json"
    path.write_text(json.dumps(entries, indent=2))
    return path
