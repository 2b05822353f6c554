"""Diagonal state-space machinery.

Parameterization, zero-order-hold style discretization, token
flattening, and the sequential scan. The recurrence, per channel d and
state index s, with gates fixed over time:

    h[0]    = h0                      (zeros unless supplied)
    h[t+1]  = abar * h[t] + bbar * x[t, d]
    y[t, d] = sum_s c[d, s] * h[t+1][d, s]

The scan is one tape op. Its backward pass does not unroll the graph;
it runs the adjoint recurrence

    lam[t+1] = c * gy[t] + abar * lam[t+2]        (lam = dL/dh)

from the end of the sequence backwards, re-materializing hidden states
segment by segment from checkpoints stored every ~sqrt(L) steps, so
memory stays O(sqrt(L) * D * Ds) on top of the O(L * D) inputs.
Gradients:

    d_abar = sum_t lam[t+1] * h[t]
    d_bbar = sum_t lam[t+1] * x[t]
    d_c    = sum_t gy[t] * h[t+1]
    d_x[t] = sum_s lam[t+1] * bbar
    d_h0   = abar * lam[1]

Two interchangeable kernels implement the loops: a numba-compiled one
(used when numba imports cleanly) and a plain numpy one. Both apply the
same per-element operation order; a unit test holds them together.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .tensor import (Tensor, as_tensor, div, exp, make_op, mul, neg, reshape,
                     softplus, sub, transpose)

try:
    from numba import njit
    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _scan_forward_np(a, b, c, x, h0, every):
    length, channels = x.shape
    nseg = (length + every - 1) // every
    ckpts = np.empty((nseg,) + a.shape, dtype=a.dtype)
    y = np.empty((length, channels), dtype=a.dtype)
    h = h0.copy()
    seg = 0
    for t in range(length):
        if t % every == 0:
            ckpts[seg] = h
            seg += 1
        h = a * h + b * x[t][:, None]
        y[t] = (c * h).sum(axis=1)
    return y, h, ckpts


def _scan_backward_np(a, b, c, x, gy, gh_final, ckpts, every):
    length = x.shape[0]
    da = np.zeros_like(a)
    db = np.zeros_like(b)
    dc = np.zeros_like(c)
    dx = np.empty_like(x)
    # carry holds a * lam[t+2]: the part of dL/dh[t+1] that flows in from
    # later steps. The final-state gradient enters without a decay factor.
    carry = gh_final.copy()
    nseg = ckpts.shape[0]
    for seg in range(nseg - 1, -1, -1):
        t0 = seg * every
        t1 = min(length, t0 + every)
        states = [ckpts[seg]]
        for i in range(t1 - t0):
            states.append(a * states[i] + b * x[t0 + i][:, None])
        for i in range(t1 - t0 - 1, -1, -1):
            t = t0 + i
            lam = c * gy[t][:, None] + carry
            da += lam * states[i]
            db += lam * x[t][:, None]
            dc += gy[t][:, None] * states[i + 1]
            dx[t] = (lam * b).sum(axis=1)
            carry = a * lam
    dh0 = carry
    return da, db, dc, dx, dh0


if _HAVE_NUMBA:

    @njit(cache=True)
    def _scan_forward_jit(a, b, c, x, h0, every, y, ckpts):  # pragma: no cover
        length, channels = x.shape
        states = a.shape[1]
        h = h0.copy()
        seg = 0
        for t in range(length):
            if t % every == 0:
                ckpts[seg] = h
                seg += 1
            for d in range(channels):
                acc = 0.0
                xv = x[t, d]
                for s in range(states):
                    h[d, s] = a[d, s] * h[d, s] + b[d, s] * xv
                    acc += c[d, s] * h[d, s]
                y[t, d] = acc
        return h

    @njit(cache=True)
    def _scan_backward_jit(a, b, c, x, gy, gh_final, ckpts, every,
                           da, db, dc, dx, hbuf):  # pragma: no cover
        length, channels = x.shape
        states = a.shape[1]
        # carry holds a * lam[t+2]; the final-state gradient enters the
        # recurrence without a decay factor.
        carry = gh_final.copy()
        nseg = ckpts.shape[0]
        for seg in range(nseg - 1, -1, -1):
            t0 = seg * every
            t1 = min(length, t0 + every)
            hbuf[0] = ckpts[seg]
            for i in range(t1 - t0):
                t = t0 + i
                for d in range(channels):
                    xv = x[t, d]
                    for s in range(states):
                        hbuf[i + 1, d, s] = a[d, s] * hbuf[i, d, s] + b[d, s] * xv
            for i in range(t1 - t0 - 1, -1, -1):
                t = t0 + i
                for d in range(channels):
                    gyv = gy[t, d]
                    xv = x[t, d]
                    accx = 0.0
                    for s in range(states):
                        l = c[d, s] * gyv + carry[d, s]
                        da[d, s] += l * hbuf[i, d, s]
                        db[d, s] += l * xv
                        dc[d, s] += gyv * hbuf[i + 1, d, s]
                        accx += l * b[d, s]
                        carry[d, s] = a[d, s] * l
                    dx[t, d] = accx
        return carry


def kernel_backend() -> str:
    """Which scan kernel this process uses ('numba' or 'numpy')."""
    return "numba" if _HAVE_NUMBA else "numpy"


def _run_forward(a, b, c, x, h0, every):
    if _HAVE_NUMBA:
        length, channels = x.shape
        nseg = (length + every - 1) // every
        y = np.empty((length, channels), dtype=a.dtype)
        ckpts = np.empty((nseg,) + a.shape, dtype=a.dtype)
        h_final = _scan_forward_jit(a, b, c, x, h0, every, y, ckpts)
        return y, h_final, ckpts
    return _scan_forward_np(a, b, c, x, h0, every)


def _run_backward(a, b, c, x, gy, gh_final, ckpts, every):
    if _HAVE_NUMBA:
        da = np.zeros_like(a)
        db = np.zeros_like(b)
        dc = np.zeros_like(c)
        dx = np.empty_like(x)
        hbuf = np.empty((every + 1,) + a.shape, dtype=a.dtype)
        dh0 = _scan_backward_jit(a, b, c, x, gy, gh_final, ckpts, every,
                                 da, db, dc, dx, hbuf)
        return da, db, dc, dx, dh0
    return _scan_backward_np(a, b, c, x, gy, gh_final, ckpts, every)


# ---------------------------------------------------------------------------
# parameters and discretization
# ---------------------------------------------------------------------------

@dataclass
class SsmParams:
    """Trainable per-channel state-space parameters.

    The continuous-time decay matrix is kept strictly negative through
    the parameterization A = -exp(a_log); the step size is kept strictly
    positive through delta = softplus(dt_raw).
    """
    a_log: Tensor   # (D, Ds)
    b: Tensor       # (D, Ds)
    c: Tensor       # (D, Ds)
    dt_raw: Tensor  # (D,)

    @property
    def channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_dim(self) -> int:
        return self.a_log.shape[1]

    def decay(self) -> Tensor:
        """The negative continuous-time matrix A = -exp(a_log)."""
        return neg(exp(self.a_log))

    def delta(self) -> Tensor:
        return softplus(self.dt_raw)

    def named(self, prefix: str):
        yield f"{prefix}.a_log", self.a_log
        yield f"{prefix}.b", self.b
        yield f"{prefix}.c", self.c
        yield f"{prefix}.dt_raw", self.dt_raw


def init_ssm_params(rng: np.random.Generator, channels: int, state_dim: int) -> SsmParams:
    """Draw fresh parameters.

    a_log is uniform over [ln 0.5, ln 8], spreading decay rates roughly
    geometrically across that range; b and c are gaussian with variance
    1/state_dim; dt_raw is chosen so softplus(dt_raw) is log-uniform in
    [1e-3, 0.1].
    """
    from .tensor import get_default_dtype
    dt = get_default_dtype()
    a_log = rng.uniform(math.log(0.5), math.log(8.0), size=(channels, state_dim))
    scale = 1.0 / math.sqrt(state_dim)
    b = rng.normal(0.0, scale, size=(channels, state_dim))
    c = rng.normal(0.0, scale, size=(channels, state_dim))
    step = np.exp(rng.uniform(math.log(1e-3), math.log(0.1), size=channels))
    dt_raw = np.log(np.expm1(step))  # inverse softplus
    return SsmParams(
        a_log=Tensor(a_log.astype(dt), requires_grad=True),
        b=Tensor(b.astype(dt), requires_grad=True),
        c=Tensor(c.astype(dt), requires_grad=True),
        dt_raw=Tensor(dt_raw.astype(dt), requires_grad=True),
    )


@dataclass
class DiscreteGates:
    """Per-channel decay and update factors for one scan."""
    decay: Tensor   # (D, Ds), in (0, 1) for negative A and positive delta
    update: Tensor  # (D, Ds)


def discretize(params: SsmParams, gate_override: Optional[Tensor] = None) -> DiscreteGates:
    """Exact exponential-integrator discretization of the diagonal system.

        decay  = exp(delta * A)
        update = (delta * A)^-1 (exp(delta * A) - 1) * (delta * B)

    ``gate_override`` substitutes a different (still strictly negative)
    continuous-time matrix for the params' own A; delta and B always
    come from ``params``. The small-step limit is update -> delta * B.
    """
    a = gate_override if gate_override is not None else params.decay()
    if not np.all(a.data < 0):
        raise ValueError("discretize: the continuous-time matrix must be strictly negative")
    if a.shape != params.b.shape:
        raise ValueError(f"discretize: gate shape {a.shape} does not match "
                         f"parameter shape {params.b.shape}")
    delta = params.delta()
    if not np.all(delta.data > 0):
        raise ValueError("discretize: step sizes must be strictly positive")
    delta_col = reshape(delta, (params.channels, 1))
    da = mul(a, delta_col)
    decay = exp(da)
    update = mul(div(sub(decay, 1.0), da), mul(params.b, delta_col))
    return DiscreteGates(decay, update)


# ---------------------------------------------------------------------------
# token flattening
# ---------------------------------------------------------------------------

def flatten_tokens(feature_map: Tensor) -> Tensor:
    """(T, D, H, W) -> (T*H*W, D), frames in order, raster order inside
    each frame. This is the sequence the scan consumes."""
    feature_map = as_tensor(feature_map)
    if feature_map.ndim != 4:
        raise ValueError(f"flatten_tokens expects (T, D, H, W), got {feature_map.shape}")
    t, d, h, w = feature_map.shape
    moved = transpose(feature_map, (0, 2, 3, 1))
    return reshape(moved, (t * h * w, d))


def unflatten_tokens(tokens: Tensor, frames: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`flatten_tokens`."""
    tokens = as_tensor(tokens)
    if tokens.ndim != 2 or tokens.shape[0] != frames * height * width:
        raise ValueError(f"unflatten_tokens: {tokens.shape} does not match "
                         f"{frames}x{height}x{width} tokens")
    d = tokens.shape[1]
    grid = reshape(tokens, (frames, height, width, d))
    return transpose(grid, (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# the scan op
# ---------------------------------------------------------------------------

def scan(decay: Tensor, update: Tensor, readout: Tensor, x: Tensor,
         h0: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """Sequential linear recurrence over a token sequence.

    Args are (D, Ds) gate/readout matrices and an (L, D) sequence.
    Returns (y, h_final): the (L, D) outputs and the (D, Ds) final
    hidden state, both differentiable. Strictly sequential over L;
    elementwise across channels and states.
    """
    decay = as_tensor(decay)
    update = as_tensor(update)
    readout = as_tensor(readout)
    x = as_tensor(x)
    if decay.ndim != 2:
        raise ValueError(f"scan: gates must be (D, Ds), got {decay.shape}")
    if decay.shape != update.shape or decay.shape != readout.shape:
        raise ValueError(f"scan: gate shapes differ: {decay.shape}, "
                         f"{update.shape}, {readout.shape}")
    if x.ndim != 2 or x.shape[1] != decay.shape[0]:
        raise ValueError(f"scan: sequence {x.shape} does not match {decay.shape[0]} channels")
    if x.shape[0] < 1:
        raise ValueError("scan: empty sequence")
    if h0 is None:
        h0 = Tensor(np.zeros(decay.shape, dtype=decay.dtype))
    elif h0.shape != decay.shape:
        raise ValueError(f"scan: h0 shape {h0.shape} does not match gates {decay.shape}")

    dtype = decay.dtype
    for name, t in (("update", update), ("readout", readout), ("x", x), ("h0", h0)):
        if t.dtype != dtype:
            raise ValueError(f"scan: {name} dtype {t.dtype} differs from gate dtype {dtype}")

    length = x.shape[0]
    every = max(1, int(round(math.sqrt(length))))
    a_np, b_np, c_np = decay.data, update.data, readout.data
    x_np, h0_np = x.data, h0.data
    y, h_final, ckpts = _run_forward(a_np, b_np, c_np, x_np, h0_np, every)

    def bwd(grads):
        gy, ghf = grads
        if gy is None:
            gy = np.zeros_like(y)
        if ghf is None:
            ghf = np.zeros_like(h_final)
        da, db, dc, dx, dh0 = _run_backward(
            a_np, b_np, c_np, x_np,
            np.ascontiguousarray(gy), np.ascontiguousarray(ghf), ckpts, every)
        return da, db, dc, dx, dh0

    y_t, h_t = make_op("scan", (decay, update, readout, x, h0), (y, h_final), bwd)
    return y_t, h_t
