"""Frequency-domain channel analysis.

Pipeline: 2-D FFT per channel, centered magnitude spectrum, a radial
partition of the frequency plane into equal-width bands, per-channel
band energies, and a scalar loss on the per-frame channel profiles
(lower loss = profiles agree across the batch of frames). Everything is
differentiable end to end, including the FFT and the magnitude.

Geometry note: with frequencies normalized per axis, the largest radius
on the centered grid is sqrt(0.5) (~0.7071) at the corners, so with many
bands the outermost ones can be empty. That is fine; an empty band just
contributes zero energy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fftcore
from .tensor import (EPS, Tensor, as_tensor, div, l2_norm, make_op, matmul, mul,
                     pad_axis_end, reshape, softmax, sub, tmean, tsum, transpose)


@dataclass
class ComplexPlanes:
    """Real and imaginary planes of a spectrum, as separate tensors."""
    re: Tensor
    im: Tensor


def fft2d(x: Tensor) -> ComplexPlanes:
    """Unnormalized forward 2-D DFT over the last two axes, centered.

    Input is real; both spatial extents must be powers of two (use
    :func:`pad_to_pow2` first otherwise). The backward rule applies the
    conjugate transform to the complex-combined output gradient and
    keeps the real part, which is the exact adjoint of the linear map.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"fft2d needs at least 2 dims, got shape {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if not (fftcore.is_pow2(h) and fftcore.is_pow2(w)):
        raise ValueError(f"fft2d: spatial extents {h}x{w} must be powers of two; "
                         "pad to the next power of two first")
    cdtype = np.complex128 if x.dtype == np.float64 else np.complex64
    spec = fftcore.fft2(x.data.astype(cdtype), sign=-1)
    spec = fftcore.center_spectrum(spec)
    re_a = np.ascontiguousarray(spec.real)
    im_a = np.ascontiguousarray(spec.imag)

    def bwd(grads):
        g_re, g_im = grads
        if g_re is None:
            g_re = np.zeros_like(re_a)
        if g_im is None:
            g_im = np.zeros_like(im_a)
        g = (g_re + 1j * g_im).astype(cdtype)
        g = fftcore.uncenter_spectrum(g)
        back = fftcore.fft2(g, sign=+1)
        return (np.ascontiguousarray(back.real).astype(x.dtype),)

    re_t, im_t = make_op("fft2d", (x,), (re_a, im_a), bwd)
    return ComplexPlanes(re_t, im_t)


def magnitude(planes: ComplexPlanes, eps: float = EPS) -> Tensor:
    """sqrt(re^2 + im^2), with an epsilon-guarded gradient at zero bins."""
    re, im = planes.re, planes.im
    if re.shape != im.shape:
        raise ValueError(f"magnitude: plane shapes differ, {re.shape} vs {im.shape}")
    mag = np.sqrt(re.data * re.data + im.data * im.data)

    def bwd(grads):
        g = grads[0]
        denom = mag + eps
        return (g * re.data / denom, g * im.data / denom)

    (out,) = make_op("magnitude", (re, im), (mag,), bwd)
    return out


@dataclass
class BandPartition:
    """Half-open radial frequency bands [k/K, (k+1)/K) on a centered grid."""
    height: int
    width: int
    bands: int
    radius: np.ndarray          # (H, W) normalized radius map
    masks: np.ndarray           # (K, H, W) float64 indicator masks
    _matrices: dict = field(default_factory=dict, repr=False)

    def mask_matrix(self, dtype) -> Tensor:
        """(H*W, K) constant matrix so band energies become one matmul."""
        key = np.dtype(dtype)
        cached = self._matrices.get(key)
        if cached is None:
            flat = self.masks.reshape(self.bands, -1).T.astype(key)
            cached = Tensor(np.ascontiguousarray(flat))
            self._matrices[key] = cached
        return cached


def build_band_partition(height: int, width: int, bands: int) -> BandPartition:
    """Partition the centered frequency plane into ``bands`` radial rings.

    The radius of bin (h, w) is sqrt(((h - H/2)/H)^2 + ((w - W/2)/W)^2);
    every bin lands in exactly one band because the rings are half-open
    and the last ring's upper edge (1.0) exceeds the radius ceiling.
    """
    if bands < 2:
        raise ValueError(f"band count must be at least 2, got {bands}")
    if height < 1 or width < 1:
        raise ValueError("band partition needs positive spatial extents")
    ys = (np.arange(height) - height / 2.0) / height
    xs = (np.arange(width) - width / 2.0) / width
    radius = np.sqrt(ys[:, None] ** 2 + xs[None, :] ** 2)
    edges = np.arange(bands + 1) / bands
    masks = np.stack([(edges[k] <= radius) & (radius < edges[k + 1])
                      for k in range(bands)]).astype(np.float64)
    return BandPartition(height, width, bands, radius, masks)


def pad_to_pow2(x: Tensor) -> Tensor:
    """Zero-pad the last two axes up to the next power of two (bottom and
    right edges), a no-op when both already qualify."""
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    th, tw = fftcore.next_pow2(h), fftcore.next_pow2(w)
    if th != h:
        x = pad_axis_end(x, -2, th - h)
    if tw != w:
        x = pad_axis_end(x, -1, tw - w)
    return x


def band_energies(mag: Tensor, part: BandPartition) -> Tensor:
    """Sum spectrum magnitudes inside each radial band.

    ``mag`` has shape (..., H, W); the result has shape (..., K). The
    reduction is a matmul against the constant 0/1 mask matrix, which
    keeps it differentiable and fast.
    """
    h, w = mag.shape[-2], mag.shape[-1]
    if (h, w) != (part.height, part.width):
        raise ValueError(f"band_energies: magnitude is {h}x{w} but the partition "
                         f"was built for {part.height}x{part.width}")
    lead = mag.shape[:-2]
    flat = reshape(mag, (-1, h * w)) if lead else reshape(mag, (1, h * w))
    energies = matmul(flat, part.mask_matrix(mag.dtype))
    return reshape(energies, lead + (part.bands,))


def spectrum_features(x: Tensor, part: BandPartition, high_bands: int,
                      eps: float = EPS) -> Tensor:
    """Fraction of spectral energy in the top ``high_bands`` rings.

    ``x`` is a real feature map (..., H, W); the result drops the two
    spatial axes, giving one scalar per leading index (one per channel,
    per frame). Energies are normalized per channel before the high-band
    sum, so features live in [0, 1]; an all-zero channel maps to 0
    rather than NaN thanks to the epsilon in the normalizer.
    """
    if not 1 <= high_bands < part.bands:
        raise ValueError(f"high_bands must be in [1, {part.bands - 1}], got {high_bands}")
    planes = fft2d(x)
    mag = magnitude(planes, eps=eps)
    e = band_energies(mag, part)
    total = tsum(e, axis=-1, keepdims=True)
    normalized = div(e, total + eps)
    high = _tail_slice(normalized, high_bands)
    return tsum(high, axis=-1)


def _tail_slice(t: Tensor, count: int) -> Tensor:
    from .tensor import getitem
    key = (slice(None),) * (t.ndim - 1) + (slice(t.shape[-1] - count, t.shape[-1]),)
    return getitem(t, key)


def channel_info_loss(features: Tensor, eps: float = EPS) -> Tensor:
    """One minus the mean pairwise cosine similarity of feature rows.

    ``features`` is (N, D): one row per frame, one column per channel.
    Rows are normalized by (norm + eps); the mean runs over all N^2
    ordered pairs including the diagonal. Identical rows give a loss
    near 0; mutually orthogonal rows approach 1 - 1/N.
    """
    features = as_tensor(features)
    if features.ndim != 2:
        raise ValueError(f"channel_info_loss expects (N, D) features, got {features.shape}")
    norms = l2_norm(features, axis=1, keepdims=True)
    unit = div(features, norms + eps)
    sim = matmul(unit, transpose(unit))
    return sub(1.0, tmean(sim))
