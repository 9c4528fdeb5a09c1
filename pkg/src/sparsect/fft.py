"""Iterative radix-2 Cooley-Tukey FFT over the last axis."""

from __future__ import annotations

import numpy as np

__all__ = ["fft", "ifft", "next_pow2"]


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p <<= 1
    return p


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalised DFT of ``x`` along its last axis; the length must be a power of two."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    out = x[..., _bit_reverse_indices(n)].copy()
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(out.shape[:-1] + (n // size, size))
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        size *= 2
    return out


def ifft(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return fft(x, inverse=True) / x.shape[-1]
