"""Segmentation quality metrics: mean IoU and a boundary F-score.

Both metrics accumulate raw counts across frames first and reduce once
at the end, so evaluation order cannot change the result.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np


def confusion_matrix(pred: np.ndarray, target: np.ndarray, n_classes: int,
                     ignore_index: int = 255) -> np.ndarray:
    """(n_classes, n_classes) count matrix, rows = target, cols = pred."""
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    p = np.asarray(pred).reshape(-1).astype(np.int64)
    t = np.asarray(target).reshape(-1).astype(np.int64)
    keep = t != ignore_index
    p, t = p[keep], t[keep]
    if ((t < 0) | (t >= n_classes)).any():
        raise ValueError("target contains class ids outside range")
    if ((p < 0) | (p >= n_classes)).any():
        raise ValueError("pred contains class ids outside range")
    counts = np.bincount(t * n_classes + p, minlength=n_classes * n_classes)
    return counts.reshape(n_classes, n_classes)


def per_class_iou(conf: np.ndarray) -> np.ndarray:
    """IoU per class from a confusion matrix; NaN for classes absent from
    both prediction and target."""
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    out = np.full(conf.shape[0], np.nan)
    present = union > 0
    out[present] = tp[present] / union[present]
    return out


def miou_from_confusion(conf: np.ndarray) -> float:
    """Mean IoU over classes present in target or prediction. Classes absent
    from both are skipped; if nothing is present the result is NaN."""
    ious = per_class_iou(conf)
    present = ~np.isnan(ious)
    if not present.any():
        return float("nan")
    return float(ious[present].mean())


def miou(pred: np.ndarray, target: np.ndarray, n_classes: int,
         ignore_index: int = 255) -> Tuple[float, np.ndarray]:
    """One-shot mean IoU plus the per-class IoU vector."""
    conf = confusion_matrix(pred, target, n_classes, ignore_index)
    return miou_from_confusion(conf), per_class_iou(conf)


# ---------------------------------------------------------------------------
# boundary F-score
# ---------------------------------------------------------------------------

def class_boundary(mask: np.ndarray, cls: int,
                   valid: np.ndarray = None) -> np.ndarray:
    """Pixels of `cls` adjacent (4-neighborhood) to a different label.
    Neither the canvas border nor an adjacent ignored pixel makes a
    boundary; only disagreement between two valid pixels does."""
    inside = mask == cls
    if valid is None:
        valid = np.ones(mask.shape, dtype=bool)
    else:
        inside = inside & valid
    edge = np.zeros(mask.shape, dtype=bool)
    edge[:-1, :] |= inside[:-1, :] & valid[1:, :] & (mask[:-1, :] != mask[1:, :])
    edge[1:, :] |= inside[1:, :] & valid[:-1, :] & (mask[1:, :] != mask[:-1, :])
    edge[:, :-1] |= inside[:, :-1] & valid[:, 1:] & (mask[:, :-1] != mask[:, 1:])
    edge[:, 1:] |= inside[:, 1:] & valid[:, :-1] & (mask[:, 1:] != mask[:, :-1])
    return edge


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a Euclidean disc via shifted unions."""
    out = mask.copy()
    r = int(radius)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            if dy * dy + dx * dx > radius * radius:
                continue
            shifted = np.zeros_like(mask)
            ys = slice(max(0, dy), mask.shape[0] + min(0, dy))
            yd = slice(max(0, -dy), mask.shape[0] + min(0, -dy))
            xs = slice(max(0, dx), mask.shape[1] + min(0, dx))
            xd = slice(max(0, -dx), mask.shape[1] + min(0, -dx))
            shifted[yd, xd] = mask[ys, xs]
            out |= shifted
    return out


@dataclass
class BoundaryStats:
    """Running precision/recall counts for boundary agreement."""
    tolerance: int = 2
    matched_pred: int = 0
    total_pred: int = 0
    matched_true: int = 0
    total_true: int = 0

    def update(self, pred: np.ndarray, target: np.ndarray, n_classes: int,
               ignore_index: int = 255) -> None:
        valid = target != ignore_index
        for cls in range(n_classes):
            bp = class_boundary(pred, cls, valid)
            bt = class_boundary(target, cls, valid)
            if not bp.any() and not bt.any():
                continue
            near_true = _dilate(bt, self.tolerance)
            near_pred = _dilate(bp, self.tolerance)
            self.matched_pred += int((bp & near_true).sum())
            self.total_pred += int(bp.sum())
            self.matched_true += int((bt & near_pred).sum())
            self.total_true += int(bt.sum())

    def f_score(self) -> float:
        if self.total_pred == 0 and self.total_true == 0:
            return float("nan")
        precision = self.matched_pred / self.total_pred if self.total_pred else 0.0
        recall = self.matched_true / self.total_true if self.total_true else 0.0
        if precision + recall == 0.0:
            return 0.0
        return 2.0 * precision * recall / (precision + recall)


@dataclass
class SegScores:
    """Bundle of both metrics for one evaluation pass."""
    n_classes: int
    ignore_index: int = 255
    boundary_tolerance: int = 2
    conf: np.ndarray = field(default=None)  # type: ignore[assignment]
    boundary: BoundaryStats = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.conf = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        self.boundary = BoundaryStats(tolerance=self.boundary_tolerance)

    def update(self, pred: np.ndarray, target: np.ndarray) -> None:
        self.conf += confusion_matrix(pred, target, self.n_classes,
                                      self.ignore_index)
        self.boundary.update(pred, target, self.n_classes, self.ignore_index)

    def miou(self) -> float:
        return miou_from_confusion(self.conf)

    def boundary_f(self) -> float:
        return self.boundary.f_score()
