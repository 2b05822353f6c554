"""Forgetting-gate inversion and refinement.

The continuous-time decay matrix A (strictly negative, shape (D, Ds))
controls how fast each channel forgets. Channels whose decay is least
negative dominate long-range aggregation; this module builds a
complementary gate for a second path:

  - ``invert_gate`` reflects A inside its own value range, so slow
    channels become fast and vice versa (an involution).
  - ``channel_importance`` scores each channel by the norm of exp(A),
    normalized by the largest score (so every value is in (0, 1)).
  - ``inverting_weight`` turns batch spectrum features into a convex
    blending weight alpha = softmax(mean features) * (1 - importance).
  - ``refine_gate`` blends: (1 - alpha) * A + alpha * A_inverted.

Everything is differentiable; gradients flow into A and, unless the
spectrum is detached, back through the features into the FFT path.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (EPS, Tensor, add, as_tensor, div, exp, l2_norm, mul,
                     reshape, softmax, sub, tmax, tmean, tmin)

log = logging.getLogger(__name__)

_AXES = {"channel": 0, "state": 1}


@dataclass
class RefinerSettings:
    """Knobs for the refinement step.

    force_alpha pins the blending weight to a constant (1.0 reproduces
    plain inversion; 0.0 reproduces the unrefined gate) and skips the
    spectrum entirely. detach_spectrum blocks gradient flow from alpha
    and the similarity loss back into the FFT path.
    """
    eps: float = EPS
    detach_spectrum: bool = False
    force_alpha: Optional[float] = None
    invert_axis: str = "channel"


@dataclass
class RefinedGate:
    """The refined decay matrix plus the pieces it was blended from."""
    refined: Tensor              # (D, Ds)
    inverted: Tensor             # (D, Ds)
    importance: Tensor           # (D,)  beta
    alpha: Tensor                # (D,)
    feature_softmax: Optional[Tensor]  # (D,), None when alpha is forced


def invert_gate(a: Tensor, axis: str = "channel") -> Tensor:
    """Reflect A inside its per-slice value range: max + min - A.

    With axis='channel' the max/min run over channels separately for
    each state index (the default); axis='state' flips each channel row
    inside its own range instead. Applying the op twice returns A
    exactly, and the value ordering within each slice reverses.
    """
    a = as_tensor(a)
    if axis not in _AXES:
        raise ValueError(f"invert_gate: axis must be 'channel' or 'state', got {axis!r}")
    ax = _AXES[axis]
    if a.ndim != 2:
        raise ValueError(f"invert_gate expects a (D, Ds) matrix, got {a.shape}")
    if a.shape[ax] == 1:
        log.info("invert_gate: extent 1 along %s axis, inversion is the identity", axis)
    hi = tmax(a, axis=ax, keepdims=True)
    lo = tmin(a, axis=ax, keepdims=True)
    return sub(add(hi, lo), a)


def channel_importance(a: Tensor, eps: float = EPS) -> Tensor:
    """Per-channel score in (0, 1): ||exp(A_d)|| over the max such norm.

    exp maps very negative entries toward zero, so channels that retain
    information longest (A closest to zero) score highest.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"channel_importance expects a (D, Ds) matrix, got {a.shape}")
    norms = l2_norm(exp(a), axis=1)
    peak = tmax(norms)
    return div(norms, add(peak, eps))


def inverting_weight(features: Tensor, importance: Tensor,
                     detach_spectrum: bool = False):
    """Blend weight per channel: softmax over the batch-mean feature
    vector, damped by (1 - importance).

    ``features`` is (N, D), one row per frame in the batch. Returns
    (alpha, feature_softmax), both (D,). alpha lands strictly inside
    (0, 1) because the softmax is positive and importance is in (0, 1).
    """
    features = as_tensor(features)
    if features.ndim != 2:
        raise ValueError(f"inverting_weight expects (N, D) features, got {features.shape}")
    if features.shape[1] != importance.shape[0]:
        raise ValueError(f"inverting_weight: {features.shape[1]} feature channels vs "
                         f"{importance.shape[0]} importance entries")
    if detach_spectrum:
        features = features.detach()
    pooled = tmean(features, axis=0)
    feat_soft = softmax(pooled, axis=0)
    alpha = mul(feat_soft, sub(1.0, importance))
    return alpha, feat_soft


def refine_gate(a: Tensor, inverted: Tensor, alpha: Tensor) -> Tensor:
    """Convex blend (1 - alpha) * A + alpha * A_inverted, alpha per channel."""
    a = as_tensor(a)
    if a.shape != inverted.shape:
        raise ValueError(f"refine_gate: shapes differ, {a.shape} vs {inverted.shape}")
    if alpha.ndim != 1 or alpha.shape[0] != a.shape[0]:
        raise ValueError(f"refine_gate: alpha shape {alpha.shape} does not match "
                         f"{a.shape[0]} channels")
    alpha_col = reshape(alpha, (a.shape[0], 1))
    return add(mul(sub(1.0, alpha_col), a), mul(alpha_col, inverted))


def refine(a: Tensor, features: Optional[Tensor],
           settings: RefinerSettings) -> RefinedGate:
    """Full refinement: invert, score, weight, blend.

    ``features`` may be None only when ``settings.force_alpha`` is set
    (the spectrum is not consulted in that case).
    """
    inverted = invert_gate(a, axis=settings.invert_axis)
    importance = channel_importance(a, eps=settings.eps)
    if settings.force_alpha is not None:
        alpha = Tensor(np.full(a.shape[0], float(settings.force_alpha), dtype=a.dtype))
        feat_soft = None
    else:
        if features is None:
            raise ValueError("refine: spectrum features required unless alpha is forced")
        alpha, feat_soft = inverting_weight(features, importance,
                                            detach_spectrum=settings.detach_spectrum)
    refined = refine_gate(a, inverted, alpha)
    return RefinedGate(refined, inverted, importance, alpha, feat_soft)
