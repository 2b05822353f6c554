"""Losses, optimizer, and the training and evaluation loops.

The objective is the last-frame cross entropy, plus a weighted sum of the
per-frame cross entropies over every frame of the clip (so the last frame
is deliberately counted twice), plus a weighted channel-profile alignment
penalty averaged over the layers that produce one.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as datamod
from .checkpoint import save_tensors
from .metrics import SegScores
from .model import SegModel, build_model
from .gates import RefinerSettings
from .tensor import Tensor, as_tensor, make_op, no_grad, tmean

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean over non-ignored pixels of the negative log softmax probability
    of the labeled class. logits: (n_classes, H, W); labels: (H, W) ints."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 3:
        raise ValueError(f"cross_entropy expects (n_classes, H, W) logits, got {logits.shape}")
    if labels.shape != logits.shape[1:]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    n_cls = logits.shape[0]
    lab = labels.astype(np.int64)
    valid = lab != ignore_index
    if ((lab < 0) | (lab >= n_cls))[valid].any():
        bad = lab[valid & ((lab < 0) | (lab >= n_cls))][0]
        raise ValueError(f"label {bad} outside [0, {n_cls})")
    lab_safe = np.where(valid, lab, 0)

    x = logits.data
    shifted = x - x.max(axis=0, keepdims=True)
    expx = np.exp(shifted)
    denom = expx.sum(axis=0)
    log_denom = np.log(denom)
    picked = np.take_along_axis(shifted, lab_safe[None], axis=0)[0]
    per_pixel = (log_denom - picked) * valid
    n_valid = int(valid.sum())
    value = per_pixel.sum() / n_valid if n_valid else 0.0
    out = np.asarray(value, dtype=x.dtype)

    def backward(grads_out):
        g = grads_out[0]
        if g is None or n_valid == 0:
            return (np.zeros_like(x),)
        grad = expx / denom
        rows, cols = np.nonzero(valid)
        grad[lab_safe[rows, cols], rows, cols] -= 1.0
        grad *= valid[None].astype(x.dtype) / n_valid
        return (np.asarray(g, dtype=x.dtype) * grad,)

    return make_op("cross_entropy", (logits,), (out,), backward)[0]


@dataclass
class LossConfig:
    """Weights of the objective's two auxiliary terms."""
    ce_weight: float = 0.5   # on the sum of per-frame cross entropies
    ci_weight: float = 0.1   # on the channel-profile alignment penalty

    def __post_init__(self):
        if self.ce_weight < 0 or self.ci_weight < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    total: Tensor
    ce_last: float
    ce_sum: float
    ci: float


def total_loss(logits: Tensor, labels: np.ndarray, profile_losses: Sequence[Tensor],
               cfg: LossConfig, ignore_index: int = 255) -> LossBreakdown:
    """Full objective over one clip. logits: (T, n_classes, H, W); labels:
    (T, H, W). The per-frame sum includes the final frame, which therefore
    carries double weight on top of its standalone term."""
    t_frames = logits.shape[0]
    per_frame = [cross_entropy(logits[t], labels[t], ignore_index)
                 for t in range(t_frames)]
    ce_last = per_frame[-1]
    ce_sum = per_frame[0]
    for term in per_frame[1:]:
        ce_sum = ce_sum + term
    total = ce_last + cfg.ce_weight * ce_sum
    ci_value = 0.0
    if profile_losses:
        ci_mean = tmean(_stack_scalars(profile_losses))
        ci_value = float(ci_mean.item())
        if cfg.ci_weight > 0:
            total = total + cfg.ci_weight * ci_mean
    return LossBreakdown(total, float(ce_last.item()), float(ce_sum.item()), ci_value)


def _stack_scalars(values: Sequence[Tensor]) -> Tensor:
    from .tensor import concat, reshape
    return concat([reshape(v, (1,)) for v in values], axis=0)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 1.0) -> float:
    """Polynomial decay from base_lr at step 0 to 0 at step == total_steps."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Parameters whose gradient is missing are left untouched; if any present
    gradient is non-finite the whole step is skipped with a warning, keeping
    the moment estimates uncontaminated.
    """

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.params}
        self.v: Dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.params}

    def grads_finite(self) -> bool:
        return all(p.grad is None or np.all(np.isfinite(p.grad))
                   for _, p in self.params)

    def step(self, lr: float) -> bool:
        """Apply one update at the given learning rate. Returns False if the
        step was skipped because of non-finite gradients."""
        if not self.grads_finite():
            log.warning("skipping optimizer step %d: non-finite gradient",
                        self.step_count + 1)
            return False
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bias1
            v_hat = v / bias2
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)
        return True

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    loss_total: float
    loss_ce_last: float
    loss_ce_sum: float
    loss_ci: float
    lr: float


@dataclass
class TrainResult:
    model: SegModel
    history: List[StepRecord]
    checkpoint_path: Optional[str]


def _load_or_make_clips(cfg) -> List[datamod.VideoClip]:
    if cfg.data_dir:
        return datamod.read_dataset(cfg.data_dir, cfg.train_clips)
    specs = datamod.make_scene_specs(
        cfg.train_clips, cfg.data_seed, min_boundary_density=0.015,
        height=cfg.img_size, width=cfg.img_size, frames=cfg.frames,
        n_classes=cfg.classes, n_shapes=cfg.shapes, noise_amp=cfg.noise)
    return [datamod.generate_clip(s) for s in specs]


def eval_clips_for(cfg) -> List[datamod.VideoClip]:
    """Held-out clips: the seed stream continues far past the training one."""
    specs = datamod.make_scene_specs(
        cfg.eval_clips, cfg.data_seed + 100000, min_boundary_density=0.015,
        height=cfg.img_size, width=cfg.img_size, frames=cfg.frames,
        n_classes=cfg.classes, n_shapes=cfg.shapes, noise_amp=cfg.noise)
    return [datamod.generate_clip(s) for s in specs]


def build_from_config(cfg) -> SegModel:
    rng = np.random.default_rng(cfg.seed)
    settings = RefinerSettings(eps=cfg.fgir_eps,
                               detach_spectrum=cfg.detach_spectrum,
                               invert_axis=cfg.invert_axis)
    return build_model(rng, cfg.variant, cfg.layers, cfg.embed_dim,
                       cfg.state_dim, cfg.bands, cfg.high_bands,
                       cfg.classes, settings=settings)


def train_loop(cfg, out_dir: Optional[str] = None,
               model: Optional[SegModel] = None) -> TrainResult:
    """Run cfg.steps optimizer steps and optionally write artifacts.

    Deterministic for a fixed config: data, init, and the clip-sampling
    stream all derive from config seeds.
    """
    from .tensor import set_default_dtype
    set_default_dtype(cfg.precision)
    clips = _load_or_make_clips(cfg)
    if model is None:
        model = build_from_config(cfg)
    loss_cfg = LossConfig(cfg.ce_weight, cfg.ci_weight)
    optim = AdamW(model.named_parameters(), weight_decay=cfg.weight_decay)
    sampler = np.random.default_rng(cfg.seed + 1)

    writer = None
    csv_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        csv_file = open(os.path.join(out_dir, "train_log.csv"), "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(["step", "loss_total", "loss_ce_last", "loss_ce_sum",
                         "loss_ci", "lr"])

    history: List[StepRecord] = []
    try:
        for step in range(cfg.steps):
            lr = poly_lr(cfg.lr, step, cfg.steps)
            optim.zero_grad()
            totals = np.zeros(4)
            for _ in range(cfg.batch_clips):
                clip = clips[int(sampler.integers(len(clips)))]
                frames = datamod.normalize_frames(clip.frames)
                logits, profile_losses, _, _ = model.forward(frames)
                loss = total_loss(logits, clip.masks, profile_losses, loss_cfg,
                                  cfg.ignore_index)
                scaled = loss.total * (1.0 / cfg.batch_clips)
                scaled.backward()
                totals += [float(loss.total.item()), loss.ce_last,
                           loss.ce_sum, loss.ci]
            totals /= cfg.batch_clips
            optim.step(lr)
            rec = StepRecord(step, totals[0], totals[1], totals[2], totals[3], lr)
            history.append(rec)
            if writer:
                writer.writerow([rec.step, f"{rec.loss_total:.8f}",
                                 f"{rec.loss_ce_last:.8f}", f"{rec.loss_ce_sum:.8f}",
                                 f"{rec.loss_ci:.8f}", f"{rec.lr:.10f}"])
    finally:
        if csv_file:
            csv_file.close()

    ckpt_path = None
    if out_dir:
        ckpt_path = os.path.join(out_dir, "model_final.ckpt")
        save_tensors(ckpt_path, {n: p.data for n, p in model.named_parameters()})
    return TrainResult(model, history, ckpt_path)


@dataclass
class EvalResult:
    miou: float
    boundary_f: float
    per_clip: List[Tuple[int, float, float]]


def eval_loop(cfg, model: SegModel, out_dir: Optional[str] = None,
              clips: Optional[List[datamod.VideoClip]] = None) -> EvalResult:
    """Score the model on each clip's final frame (the clip's earlier
    frames serve as temporal context, matching how the loss treats the
    last frame as the prediction target)."""
    from .tensor import set_default_dtype
    set_default_dtype(cfg.precision)
    if clips is None:
        if cfg.data_dir:
            clips = datamod.read_dataset(cfg.data_dir, cfg.eval_clips)
        else:
            clips = eval_clips_for(cfg)
    scores = SegScores(cfg.classes, ignore_index=cfg.ignore_index)
    per_clip: List[Tuple[int, float, float]] = []
    state = None
    with no_grad():
        for idx, clip in enumerate(clips):
            frames = datamod.normalize_frames(clip.frames)
            logits, _, new_state, _ = model.forward(
                frames, state=state if cfg.streaming_eval else None)
            if cfg.streaming_eval:
                state = new_state
            pred = np.argmax(logits.data, axis=1).astype(np.int64)
            last = pred.shape[0] - 1
            clip_scores = SegScores(cfg.classes, ignore_index=cfg.ignore_index)
            scores.update(pred[last], clip.masks[last])
            clip_scores.update(pred[last], clip.masks[last])
            per_clip.append((idx, clip_scores.miou(), clip_scores.boundary_f()))

    result = EvalResult(scores.miou(), scores.boundary_f(), per_clip)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.txt"), "w") as f:
            f.write(f"miou {result.miou:.6f}\n")
            f.write(f"boundary_f {result.boundary_f:.6f}\n")
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["clip", "miou", "boundary_f"])
            for idx, m, b in per_clip:
                w.writerow([idx, f"{m:.6f}", f"{b:.6f}"])
            w.writerow(["all", f"{result.miou:.6f}", f"{result.boundary_f:.6f}"])
    return result
