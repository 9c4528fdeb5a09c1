"""Shared image types, a portable RNG and the raw/PGM file formats.

The random generator is SplitMix64 (Steele, Lea & Flood 2014). It is
counter based: draw ``k`` of a stream is ``mix(seed + (k + 1) * GAMMA)``,
which makes vectorised generation and cross-platform reproducibility
trivial.  Constants::

    GAMMA = 0x9E3779B97F4A7C15
    M1    = 0xBF58476D1CE4E5B9
    M2    = 0x94D049BB133111EB
    z = (z ^ (z >> 30)) * M1;  z = (z ^ (z >> 27)) * M2;  z ^= z >> 31
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TypeVar

import numpy as np

__all__ = [
    "Image2D",
    "Mask2D",
    "Rng",
    "as_array",
    "as_mask",
    "fisher_yates_shuffle",
    "save_raw",
    "load_raw",
    "export_pgm",
    "FormatError",
]

T = TypeVar("T")

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class FormatError(ValueError):
    """Raised when a raw payload does not agree with its sidecar."""


@dataclass(frozen=True)
class Image2D:
    """Dense 2-D float64 image, stored as a C-ordered ``(height, width)`` array.

    ``value_range`` is the declared dynamic range used by the metrics
    (it is metadata, pixel values may fall outside it).
    """

    data: np.ndarray
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"image data must be 2-D, got shape {arr.shape}")
        lo, hi = (float(v) for v in self.value_range)
        if not lo < hi:
            raise ValueError(f"value_range must satisfy lo < hi, got {(lo, hi)}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "value_range", (lo, hi))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Image2D":
        return Image2D(data, self.value_range)


@dataclass(frozen=True)
class Mask2D:
    """Boolean pixel mask, ``(height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"mask data must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def count(self) -> int:
        return int(self.data.sum())


def as_array(image) -> np.ndarray:
    """Pixel array of an :class:`Image2D` or any array-like."""
    if isinstance(image, Image2D):
        return image.data
    return np.asarray(image, dtype=np.float64)


def as_mask(mask) -> np.ndarray:
    if isinstance(mask, Mask2D):
        return mask.data
    return np.asarray(mask, dtype=bool)


def _splitmix(states: np.ndarray) -> np.ndarray:
    z = states.copy()
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


@dataclass
class Rng:
    """SplitMix64 stream.  Single owner; use :meth:`spawn` for parallel work."""

    seed: int
    counter: int = field(default=0)

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64

    def random_u64(self, size: int) -> np.ndarray:
        size = int(size)
        k = np.arange(self.counter + 1, self.counter + 1 + size, dtype=np.uint64)
        self.counter += size
        with np.errstate(over="ignore"):
            states = np.uint64(self.seed) + k * _GAMMA
            return _splitmix(states)

    def next_u64(self) -> int:
        return int(self.random_u64(1)[0])

    def random(self, size=None):
        """Uniform doubles in [0, 1) from the top 53 bits."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.random_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def uniform(self, lo: float, hi: float, size=None):
        u = self.random(size)
        return lo + (hi - lo) * u

    def integers(self, high, size=None):
        """Integers in ``[0, high)``; ``high`` may be an array broadcast against ``size``.

        Uses ``floor(u * high)`` on 53-bit doubles; the bias is below 2**-53 * high.
        """
        u = self.random(size)
        out = np.floor(u * np.asarray(high, dtype=np.float64)).astype(np.int64)
        if size is None:
            return int(out)
        return out

    def normal(self, size=None):
        """Standard normals by Box-Muller (two uniforms per output)."""
        n = 1 if size is None else int(np.prod(size))
        u1 = 1.0 - self.random(n)  # (0, 1]
        u2 = self.random(n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def spawn(self) -> "Rng":
        """Independent child stream seeded from the next draw."""
        return Rng(self.next_u64())


def fisher_yates_shuffle(items: Sequence[T], rng: Rng) -> list[T]:
    """Return a uniformly random permutation of ``items`` (Durstenfeld's variant)."""
    out = list(items)
    n = len(out)
    if n < 2:
        return out
    bounds = np.arange(n, 1, -1)  # i + 1 for i = n-1 .. 1
    picks = rng.integers(bounds, size=n - 1)
    for i, j in zip(range(n - 1, 0, -1), picks):
        out[i], out[j] = out[j], out[i]
    return out


def _raw_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".f64", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".f64"), p.with_name(p.name + ".json")


def write_f64(path, data: np.ndarray) -> None:
    np.ascontiguousarray(data, dtype="<f8").tofile(path)


def read_f64(path, count: int) -> np.ndarray:
    payload = Path(path).read_bytes()
    if len(payload) != 8 * count:
        raise FormatError(
            f"{path}: expected {count} float64 values ({8 * count} bytes), "
            f"payload has {len(payload)} bytes"
        )
    return np.frombuffer(payload, dtype="<f8").astype(np.float64)


def save_raw(image: Image2D, path) -> tuple[Path, Path]:
    """Write ``<path>.f64`` (little-endian float64, row-major) and ``<path>.json``."""
    payload, sidecar = _raw_paths(path)
    payload.parent.mkdir(parents=True, exist_ok=True)
    write_f64(payload, image.data)
    lo, hi = image.value_range
    sidecar.write_text(json.dumps({"width": image.width, "height": image.height, "lo": lo, "hi": hi}))
    return payload, sidecar


def load_raw(path) -> Image2D:
    payload, sidecar = _raw_paths(path)
    meta = json.loads(sidecar.read_text())
    try:
        w, h = int(meta["width"]), int(meta["height"])
        lo, hi = float(meta["lo"]), float(meta["hi"])
    except KeyError as exc:
        raise FormatError(f"{sidecar}: missing key {exc}") from None
    data = read_f64(payload, w * h)
    return Image2D(data.reshape(h, w), (lo, hi))


def export_pgm(image, window: tuple[float, float], path) -> bytes:
    """Write an 8-bit binary PGM (P5, maxval 255) of ``image`` windowed to ``window``.

    Returns the pixel bytes that were written.
    """
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"window must satisfy lo < hi, got {(lo, hi)}")
    arr = as_array(image)
    scaled = np.clip((arr - lo) / (hi - lo), 0.0, 1.0) * 255.0
    # round half up; np.round would send 127.5 to 128 but 126.5 to 126
    pixels = np.floor(scaled + 0.5).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    body = pixels.tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)
    return body


def threads_from_env(default: int = 1) -> int:
    """Parallelism cap from ``SPARSECT_THREADS``."""
    raw = os.environ.get("SPARSECT_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default
