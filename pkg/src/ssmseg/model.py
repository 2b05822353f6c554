"""Segmentation model: patch encoder, dual-path scan layers, pixel decoder.

A layer normalizes its input tokens, projects them once (both scan paths
read the same projected tensor), runs two state-space scans over the
flattened spatiotemporal token sequence, and fuses the concatenated path
outputs with a small MLP plus a residual connection.

The second path is the vanilla one (its own decay matrix); the first
path runs with a refined decay matrix blended from the vanilla one and
its inversion, weighted by how much high-frequency spectral energy each
channel carries. Ablation variants rewire exactly this part:

    rs-ssm    full model: spectrum-weighted refinement plus profile loss
    no-cwap   dual path, refined gate pinned to the plain inversion
    bi-v-ssm  dual path, both scans use their own decay matrices
    v-ssm     single vanilla path, narrower fusion input

Only the wiring differs; rs-ssm, no-cwap and bi-v-ssm allocate identical
parameter sets, v-ssm allocates strictly fewer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import spectral
from .gates import RefinedGate, RefinerSettings, refine
from .ssm import (DiscreteGates, SsmParams, discretize, flatten_tokens,
                  init_ssm_params, scan, unflatten_tokens)
from .tensor import (EPS, Tensor, add, as_tensor, concat, div, gelu, make_op,
                     matmul, mul, reshape, sqrt, sub, tmean, transpose)

PATCH_STRIDE = 4

VARIANTS = ("rs-ssm", "v-ssm", "bi-v-ssm", "no-cwap")


def normalize_variant(tag: str) -> str:
    low = tag.strip().lower()
    if low not in VARIANTS:
        raise ValueError(f"unknown variant {tag!r}; expected one of {', '.join(VARIANTS)}")
    return low


_partitions: dict = {}


def _partition_for(h: int, w: int, bands: int) -> spectral.BandPartition:
    key = (h, w, bands)
    part = _partitions.get(key)
    if part is None:
        part = spectral.build_band_partition(h, w, bands)
        _partitions[key] = part
    return part


# ---------------------------------------------------------------------------
# small parameter containers
# ---------------------------------------------------------------------------

@dataclass
class Linear:
    w: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


def init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> Linear:
    from .tensor import get_default_dtype
    dt = get_default_dtype()
    w = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out)).astype(dt)
    return Linear(Tensor(w, requires_grad=True),
                  Tensor(np.zeros(d_out, dtype=dt), requires_grad=True))


@dataclass
class LayerNorm:
    gain: Tensor
    bias: Tensor
    eps: float = EPS

    def __call__(self, x: Tensor) -> Tensor:
        mu = tmean(x, axis=-1, keepdims=True)
        centered = sub(x, mu)
        var = tmean(mul(centered, centered), axis=-1, keepdims=True)
        unit = div(centered, sqrt(add(var, self.eps)))
        return add(mul(unit, self.gain), self.bias)

    def named(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


def init_layer_norm(dim: int) -> LayerNorm:
    from .tensor import get_default_dtype
    dt = get_default_dtype()
    return LayerNorm(Tensor(np.ones(dim, dtype=dt), requires_grad=True),
                     Tensor(np.zeros(dim, dtype=dt), requires_grad=True))


# ---------------------------------------------------------------------------
# bilinear resize primitive
# ---------------------------------------------------------------------------

def _resize_taps(n_in: int, n_out: int):
    # Half-pixel-center source coordinates, clamped at the borders.
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, 1.0 - frac, frac


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes. The op is linear, so the
    backward pass scatter-adds the same taps transposed."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"upsample_bilinear needs spatial axes, got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    rl, rh, rw0, rw1 = _resize_taps(h, out_h)
    cl, ch, cw0, cw1 = _resize_taps(w, out_w)
    dt = x.dtype
    rw0c = rw0.astype(dt)[:, None]
    rw1c = rw1.astype(dt)[:, None]
    cw0c = cw0.astype(dt)
    cw1c = cw1.astype(dt)

    rows = x.data[..., rl, :] * rw0c + x.data[..., rh, :] * rw1c
    data = rows[..., cl] * cw0c + rows[..., ch] * cw1c

    def bwd(grads):
        g = grads[0]
        d_rows = np.zeros(g.shape[:-1] + (w,), dtype=g.dtype)
        np.add.at(d_rows, (Ellipsis, cl), g * cw0c)
        np.add.at(d_rows, (Ellipsis, ch), g * cw1c)
        dx = np.zeros(g.shape[:-2] + (h, w), dtype=g.dtype)
        np.add.at(dx, (Ellipsis, rl, slice(None)), d_rows * rw0c)
        np.add.at(dx, (Ellipsis, rh, slice(None)), d_rows * rw1c)
        return (dx,)

    (out,) = make_op("upsample_bilinear", (x,), (data,), bwd)
    return out


# ---------------------------------------------------------------------------
# patch embedding
# ---------------------------------------------------------------------------

def patchify(frames: Tensor, stride: int = PATCH_STRIDE) -> Tensor:
    """(T, C, H, W) -> (T * H/s * W/s, C * s * s) non-overlapping patches,
    raster order, channel-major inside each patch."""
    frames = as_tensor(frames)
    if frames.ndim != 4:
        raise ValueError(f"patchify expects (T, C, H, W), got {frames.shape}")
    t, ch, h, w = frames.shape
    if h % stride or w % stride:
        raise ValueError(f"patchify: {h}x{w} not divisible by stride {stride}")
    hs, ws = h // stride, w // stride
    grid = reshape(frames, (t, ch, hs, stride, ws, stride))
    moved = transpose(grid, (0, 2, 4, 1, 3, 5))
    return reshape(moved, (t * hs * ws, ch * stride * stride))


# ---------------------------------------------------------------------------
# the dual-path layer
# ---------------------------------------------------------------------------

@dataclass
class LayerTrace:
    """Numpy snapshots of one layer's internals, for tests and the gate
    inspection command."""
    features: Optional[np.ndarray] = None      # (T, D) spectrum features
    decay_raw: Optional[np.ndarray] = None     # base path A
    inverted: Optional[np.ndarray] = None
    refined: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    importance: Optional[np.ndarray] = None
    gates_refine: Optional[DiscreteGates] = None
    gates_base: Optional[DiscreteGates] = None
    path_refine: Optional[np.ndarray] = None   # (L, D) pre-fusion outputs
    path_base: Optional[np.ndarray] = None


class DualPathLayer:
    def __init__(self, rng: np.random.Generator, in_dim: int, dim: int,
                 state_dim: int, variant: str):
        self.in_dim = in_dim
        self.dim = dim
        self.state_dim = state_dim
        self.variant = variant
        self.dual = variant != "v-ssm"
        self.norm = init_layer_norm(in_dim)
        self.proj = init_linear(rng, in_dim, dim)
        if self.dual:
            self.refine_path = init_ssm_params(rng, dim, state_dim)
        else:
            self.refine_path = None
        self.base_path = init_ssm_params(rng, dim, state_dim)
        fuse_in = 2 * dim if self.dual else dim
        self.fuse_hidden = init_linear(rng, fuse_in, 2 * dim)
        self.fuse_out = init_linear(rng, 2 * dim, dim)

    def named(self, prefix: str):
        yield from self.norm.named(f"{prefix}.norm")
        yield from self.proj.named(f"{prefix}.proj")
        if self.refine_path is not None:
            yield from self.refine_path.named(f"{prefix}.refine")
        yield from self.base_path.named(f"{prefix}.base")
        yield from self.fuse_hidden.named(f"{prefix}.fuse_hidden")
        yield from self.fuse_out.named(f"{prefix}.fuse_out")

    def forward(self, m_in: Tensor, bands: int, high_bands: int,
                settings: RefinerSettings, state: Optional[Tensor] = None,
                collect: bool = False):
        """Run one layer over a (T, C, Hs, Ws) feature map.

        Returns (m_out, profile_loss_or_None, h_final, trace_or_None).
        ``state`` threads a previous h_final into the scan (stacked
        (2D, Ds) for dual variants, (D, Ds) for the single path).
        """
        if m_in.ndim != 4 or m_in.shape[1] != self.in_dim:
            raise ValueError(f"layer expects (T, {self.in_dim}, H, W), got {m_in.shape}")
        t, _, hs, ws = m_in.shape
        tok_in = flatten_tokens(m_in)
        projected = self.proj(self.norm(tok_in))

        features = None
        loss_ci = None
        gate: Optional[RefinedGate] = None
        trace = LayerTrace() if collect else None

        if self.variant == "rs-ssm":
            feat_map = spectral.pad_to_pow2(unflatten_tokens(projected, t, hs, ws))
            part = _partition_for(feat_map.shape[-2], feat_map.shape[-1], bands)
            features = spectral.spectrum_features(feat_map, part, high_bands,
                                                  eps=settings.eps)
            loss_input = features.detach() if settings.detach_spectrum else features
            loss_ci = spectral.channel_info_loss(loss_input, eps=settings.eps)

        if self.dual:
            base_a = self.base_path.decay()
            if self.variant == "rs-ssm":
                gate = refine(base_a, features, settings)
            elif self.variant == "no-cwap":
                pinned = RefinerSettings(eps=settings.eps, force_alpha=1.0,
                                         invert_axis=settings.invert_axis)
                gate = refine(base_a, None, pinned)
            gates_refine = discretize(self.refine_path,
                                      gate_override=gate.refined if gate else None)
            gates_base = discretize(self.base_path)
            decay = concat([gates_refine.decay, gates_base.decay], axis=0)
            update = concat([gates_refine.update, gates_base.update], axis=0)
            readout = concat([self.refine_path.c, self.base_path.c], axis=0)
            sequence = concat([projected, projected], axis=1)
        else:
            gates_refine = None
            gates_base = discretize(self.base_path)
            decay, update = gates_base.decay, gates_base.update
            readout = self.base_path.c
            sequence = projected

        y, h_final = scan(decay, update, readout, sequence, h0=state)
        fused = self.fuse_out(gelu(self.fuse_hidden(y)))
        out_tok = add(fused, tok_in) if self.in_dim == self.dim else fused
        m_out = unflatten_tokens(out_tok, t, hs, ws)

        if collect:
            trace.features = None if features is None else features.data.copy()
            trace.gates_base = gates_base
            trace.gates_refine = gates_refine
            if self.dual:
                trace.decay_raw = self.base_path.decay().data.copy()
                trace.path_refine = y.data[:, :self.dim].copy()
                trace.path_base = y.data[:, self.dim:].copy()
                if gate is not None:
                    trace.inverted = gate.inverted.data.copy()
                    trace.refined = gate.refined.data.copy()
                    trace.alpha = gate.alpha.data.copy()
                    trace.importance = gate.importance.data.copy()
            else:
                trace.path_base = y.data.copy()
        return m_out, loss_ci, h_final, trace


# ---------------------------------------------------------------------------
# the full model
# ---------------------------------------------------------------------------

class SegModel:
    """Patch embedding, a stack of dual-path layers, per-pixel classifier."""

    def __init__(self, rng: np.random.Generator, variant: str, layers: int,
                 embed_dim: int, state_dim: int, bands: int, high_bands: int,
                 n_classes: int, settings: Optional[RefinerSettings] = None):
        if layers < 1:
            raise ValueError("need at least one layer")
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.variant = normalize_variant(variant)
        self.embed_dim = embed_dim
        self.state_dim = state_dim
        self.bands = bands
        self.high_bands = high_bands
        self.n_classes = n_classes
        self.settings = settings or RefinerSettings()
        patch_in = 3 * PATCH_STRIDE * PATCH_STRIDE
        self.patch = init_linear(rng, patch_in, embed_dim)
        self.patch_norm = init_layer_norm(embed_dim)
        self.layers = [DualPathLayer(rng, embed_dim, embed_dim, state_dim, self.variant)
                       for _ in range(layers)]
        self.decoder = init_linear(rng, embed_dim, n_classes)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = list(self.patch.named("patch"))
        out += list(self.patch_norm.named("patch_norm"))
        for i, layer in enumerate(self.layers):
            out += list(layer.named(f"layers.{i}"))
        out += list(self.decoder.named("decoder"))
        return out

    def parameter_count(self) -> int:
        return sum(int(t.size) for _, t in self.named_parameters())

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ValueError(f"checkpoint does not match model: missing {missing}, "
                             f"unexpected {extra}")
        for name, tensor in params.items():
            arr = state[name]
            if arr.shape != tensor.shape:
                raise ValueError(f"checkpoint tensor {name!r} has shape {arr.shape}, "
                                 f"model expects {tensor.shape}")
            tensor.data = arr.astype(tensor.dtype)

    def forward(self, frames: Tensor, state: Optional[list] = None,
                collect: bool = False):
        """frames: (T, 3, H, W) floats. Returns (logits, profile_losses,
        new_state, traces): logits are (T, n_classes, H, W); the loss
        list has one scalar tensor per layer (empty unless the variant
        computes spectrum features); new_state threads final hidden
        states per layer; traces mirror the layer list when collected.
        """
        frames = as_tensor(frames)
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ValueError(f"expected (T, 3, H, W) frames, got {frames.shape}")
        t, _, h, w = frames.shape
        if h % PATCH_STRIDE or w % PATCH_STRIDE:
            raise ValueError(f"frame size {h}x{w} not divisible by patch stride {PATCH_STRIDE}")
        hs, ws = h // PATCH_STRIDE, w // PATCH_STRIDE

        tokens = self.patch_norm(self.patch(patchify(frames)))
        feature_map = unflatten_tokens(tokens, t, hs, ws)

        losses = []
        new_state = []
        traces = []
        for i, layer in enumerate(self.layers):
            layer_state = None if state is None else state[i]
            feature_map, loss_ci, h_final, trace = layer.forward(
                feature_map, self.bands, self.high_bands, self.settings,
                state=layer_state, collect=collect)
            if loss_ci is not None:
                losses.append(loss_ci)
            new_state.append(h_final)
            traces.append(trace)

        logits_tok = self.decoder(flatten_tokens(feature_map))
        logits = unflatten_tokens(logits_tok, t, hs, ws)
        logits = upsample_bilinear(logits, h, w)
        return logits, losses, new_state, (traces if collect else None)


def build_model(rng: np.random.Generator, variant: str, layers: int,
                embed_dim: int, state_dim: int, bands: int, high_bands: int,
                n_classes: int, settings: Optional[RefinerSettings] = None) -> SegModel:
    return SegModel(rng, variant, layers, embed_dim, state_dim, bands,
                    high_bands, n_classes, settings=settings)
