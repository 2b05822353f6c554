"""Iterative radix-2 FFT over the trailing axes of numpy arrays.

These are raw complex kernels, no autodiff here. Transforms are
unnormalized in both directions: ``sign=-1`` is the forward DFT,
``sign=+1`` applies the conjugate kernel (the adjoint), which equals the
inverse transform times N. The length of every transformed axis must be
a power of two; callers pad beforehand.

The 1-D routine is the textbook decimation-in-time scheme: permute the
input into bit-reversed order, then run log2(N) butterfly stages. Stages
are vectorized over all leading axes at once, so a whole batch of
channels transforms in a handful of numpy calls per stage.
"""
from __future__ import annotations

import numpy as np

_bitrev_cache: dict = {}


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    if n < 1:
        raise ValueError("next_pow2 needs a positive size")
    p = 1
    while p < n:
        p <<= 1
    return p


def bit_reversal_permutation(n: int) -> np.ndarray:
    """Index permutation that reorders 0..n-1 by reversed bit patterns."""
    if not is_pow2(n):
        raise ValueError(f"length {n} is not a power of two")
    cached = _bitrev_cache.get(n)
    if cached is not None:
        return cached
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    _bitrev_cache[n] = rev
    return rev


def fft_last_axis(x: np.ndarray, sign: int) -> np.ndarray:
    """Unnormalized radix-2 DFT along the last axis of a complex array."""
    if sign not in (-1, 1):
        raise ValueError("sign must be -1 (forward) or +1 (adjoint)")
    n = x.shape[-1]
    if not is_pow2(n):
        raise ValueError(f"axis length {n} is not a power of two; pad first")
    y = np.ascontiguousarray(x[..., bit_reversal_permutation(n)])
    if n == 1:
        return y
    lead = y.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        w = np.exp(sign * 2j * np.pi * np.arange(half) / m).astype(y.dtype)
        blocks = y.reshape(lead + (n // m, m))
        twiddled = blocks[..., half:] * w
        even = blocks[..., :half]
        blocks[..., half:] = even - twiddled
        blocks[..., :half] = even + twiddled
        m *= 2
    return y


def fft2(x: np.ndarray, sign: int) -> np.ndarray:
    """Apply the 1-D transform along the last axis, then the second-last
    (row transforms followed by column transforms)."""
    y = fft_last_axis(x, sign)
    y = fft_last_axis(y.swapaxes(-1, -2), sign)
    return y.swapaxes(-1, -2)


def center_spectrum(x: np.ndarray) -> np.ndarray:
    """Move the zero-frequency bin from index (0, 0) to (H//2, W//2)."""
    return np.roll(np.roll(x, x.shape[-2] // 2, axis=-2), x.shape[-1] // 2, axis=-1)


def uncenter_spectrum(x: np.ndarray) -> np.ndarray:
    return np.roll(np.roll(x, -(x.shape[-2] // 2), axis=-2), -(x.shape[-1] // 2), axis=-1)
