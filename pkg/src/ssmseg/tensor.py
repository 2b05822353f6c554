"""Dense tensors with reverse-mode automatic differentiation.

Every numeric path in this package runs through this module: numpy arrays
wrapped in :class:`Tensor`, a define-by-run record of operations, and a
backward pass that replays the record in reverse topological order. The
surface is deliberately small. Broadcasting follows numpy's trailing-axis
alignment (leading length-1 padding only), matmul is strictly 2-D, and
each primitive carries its own gradient rule.

Precision is a process-wide default: float32 for speed runs, float64
whenever gradients are being checked. ``set_default_dtype`` changes what
constructors produce; tensors built from an existing float array keep
that array's dtype.

Gradient bookkeeping: only leaves (tensors with no creator and
``requires_grad=True``) get a persistent ``.grad``; repeated ``backward``
calls accumulate into it until ``zero_grad``. Intermediate gradients live
in a transient map for the duration of one backward sweep.
"""
from __future__ import annotations

import threading
import warnings
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

# Shared guard for divide-by-norm and divide-by-magnitude sites. Modules
# may override locally, but this is the house value.
EPS = 1e-8

_DTYPE_ALIASES = {
    "f32": np.dtype(np.float32),
    "f64": np.dtype(np.float64),
    "float32": np.dtype(np.float32),
    "float64": np.dtype(np.float64),
}
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeMismatch(ValueError):
    """Raised when operand shapes cannot be combined."""


class NonFiniteError(ArithmeticError):
    """Raised by debug-mode checks when an op produces NaN or Inf."""


class GraphError(RuntimeError):
    """Raised on misuse of the backward machinery."""


class _TapeState(threading.local):
    # Grad recording is per-thread so independent graphs can run on
    # separate threads without sharing mutable state.
    def __init__(self):
        self.enabled = True


_tape = _TapeState()
_default_dtype = np.dtype(np.float64)
_debug = False


def set_default_dtype(dtype) -> np.dtype:
    """Set the dtype used by constructors. Accepts 'f32'/'f64' or a numpy
    float dtype. Returns the previous default."""
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPE_ALIASES:
            raise ValueError(f"unknown precision {dtype!r}, expected 'f32' or 'f64'")
        dtype = _DTYPE_ALIASES[dtype]
    dtype = np.dtype(dtype)
    if dtype not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported default dtype {dtype}")
    prev = _default_dtype
    _default_dtype = dtype
    return prev


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_debug(on: bool) -> None:
    """Toggle debug checks (finite outputs, nonzero denominators)."""
    global _debug
    _debug = bool(on)


def debug_enabled() -> bool:
    return _debug


@contextmanager
def no_grad():
    """Context manager that suspends op recording on this thread."""
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def grad_enabled() -> bool:
    return _tape.enabled


class OpRecord:
    """One recorded operation.

    ``backward_fn`` maps a tuple of output gradients (numpy arrays, or
    None for outputs that received no gradient) to a tuple of parent
    gradients aligned with ``parents`` (None allowed for non-float or
    constant parents). Parent gradients must already match the parent
    shapes; broadcasting ops reduce before returning.
    """

    __slots__ = ("name", "parents", "outputs", "backward_fn")

    def __init__(self, name, parents, outputs, backward_fn):
        self.name = name
        self.parents = parents
        self.outputs = outputs
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"OpRecord({self.name})"


class Tensor:
    """A dense float array plus gradient metadata.

    Data is immutable by convention once the tensor participates in a
    graph; the optimizer replaces ``.data`` wholesale between steps,
    which is safe because the tape is rebuilt every forward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "creator")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("pass Tensor.data, not a Tensor, to the constructor")
        if isinstance(data, np.ndarray):
            if dtype is not None:
                arr = data.astype(dtype, copy=False)
            elif data.dtype in _FLOAT_DTYPES:
                arr = data
            else:
                arr = data.astype(_default_dtype)
        else:
            arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"tensors hold float32/float64 data, got {arr.dtype}")
        if _debug and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[OpRecord] = None

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def numpy(self) -> np.ndarray:
        """The underlying array (a view; treat as read-only)."""
        return self.data

    def detach(self) -> "Tensor":
        """A constant tensor sharing this tensor's storage."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    # -- reduction sugar --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def min(self, axis=None, keepdims=False):
        return tmin(self, axis=axis, keepdims=keepdims)

    def argmax(self, axis=None) -> np.ndarray:
        """Index of the first maximum (plain numpy, not differentiable)."""
        return np.argmax(self.data, axis=axis)

    def argmin(self, axis=None) -> np.ndarray:
        return np.argmin(self.data, axis=axis)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"


def _bad_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _finite_check(arrays, name: str) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"op '{name}' produced non-finite values")


def make_op(name: str,
            parents: Sequence[Tensor],
            out_arrays: Sequence[np.ndarray],
            backward_fn: Callable) -> tuple:
    """Wrap raw forward results into tensors and record the op.

    Recording happens only when grad mode is on and some parent requires
    grad; otherwise the outputs are plain constants and the closure is
    dropped. This is the single entry point other modules use to define
    custom primitives (FFT, scan, resampling, losses).
    """
    if _debug:
        _finite_check(out_arrays, name)
    track = _tape.enabled and any(p.requires_grad for p in parents)
    outs = tuple(Tensor(a) for a in out_arrays)
    if track:
        rec = OpRecord(name, tuple(parents), outs, backward_fn)
        for o in outs:
            o.requires_grad = True
            o.creator = rec
    return outs


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to ``shape`` by summing broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _apply2(fn, a: Tensor, b: Tensor, name: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(
            f"{name}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


_SCALARS = (int, float, np.integer, np.floating)


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if isinstance(a, _SCALARS):
        a, b = b, a
    a = as_tensor(a)
    if isinstance(b, _SCALARS):
        s = float(b)
        (out,) = make_op("add", (a,), (a.data + s,), lambda gs: (gs[0],))
        return out
    b = as_tensor(b)
    data = _apply2(np.add, a, b, "add")

    def bwd(gs):
        g = gs[0]
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    (out,) = make_op("add", (a, b), (data,), bwd)
    return out


def sub(a, b) -> Tensor:
    if isinstance(a, _SCALARS):
        s = float(a)
        b = as_tensor(b)
        (out,) = make_op("rsub", (b,), (s - b.data,), lambda gs: (-gs[0],))
        return out
    a = as_tensor(a)
    if isinstance(b, _SCALARS):
        s = float(b)
        (out,) = make_op("sub", (a,), (a.data - s,), lambda gs: (gs[0],))
        return out
    b = as_tensor(b)
    data = _apply2(np.subtract, a, b, "sub")

    def bwd(gs):
        g = gs[0]
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    (out,) = make_op("sub", (a, b), (data,), bwd)
    return out


def mul(a, b) -> Tensor:
    if isinstance(a, _SCALARS):
        a, b = b, a
    a = as_tensor(a)
    if isinstance(b, _SCALARS):
        s = float(b)
        (out,) = make_op("mul", (a,), (a.data * s,), lambda gs: (gs[0] * s,))
        return out
    b = as_tensor(b)
    data = _apply2(np.multiply, a, b, "mul")

    def bwd(gs):
        g = gs[0]
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    (out,) = make_op("mul", (a, b), (data,), bwd)
    return out


def div(a, b) -> Tensor:
    if isinstance(a, _SCALARS):
        s = float(a)
        b = as_tensor(b)
        _denominator_check(b.data, "div")
        data = s / b.data

        def bwd_r(gs):
            return (-gs[0] * s / (b.data * b.data),)

        (out,) = make_op("div", (b,), (data,), bwd_r)
        return out
    a = as_tensor(a)
    if isinstance(b, _SCALARS):
        s = float(b)
        if s == 0.0:
            raise ZeroDivisionError("div: scalar denominator is zero")
        (out,) = make_op("div", (a,), (a.data / s,), lambda gs: (gs[0] / s,))
        return out
    b = as_tensor(b)
    _denominator_check(b.data, "div")
    data = _apply2(np.divide, a, b, "div")

    def bwd(gs):
        g = gs[0]
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    (out,) = make_op("div", (a, b), (data,), bwd)
    return out


def _denominator_check(arr: np.ndarray, name: str) -> None:
    if _debug and np.any(arr == 0):
        raise ZeroDivisionError(f"{name}: zero in denominator (debug check)")


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    (out,) = make_op("neg", (a,), (-a.data,), lambda gs: (-gs[0],))
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    (out,) = make_op("exp", (a,), (data,), lambda gs: (gs[0] * data,))
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if _debug and np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input (debug check)")
    data = np.log(a.data)
    (out,) = make_op("log", (a,), (data,), lambda gs: (gs[0] / a.data,))
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bwd(gs):
        return (gs[0] * 0.5 / data,)

    (out,) = make_op("sqrt", (a,), (data,), bwd)
    return out


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    _denominator_check(a.data, "reciprocal")
    data = 1.0 / a.data
    (out,) = make_op("reciprocal", (a,), (data,), lambda gs: (-gs[0] * data * data,))
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)
    (out,) = make_op("tanh", (a,), (data,), lambda gs: (gs[0] * (1.0 - data * data),))
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = _sigmoid_np(a.data)
    (out,) = make_op("sigmoid", (a,), (data,), lambda gs: (gs[0] * data * (1.0 - data),))
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow; gradient is sigmoid."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(gs):
        return (gs[0] * _sigmoid_np(x),)

    (out,) = make_op("softplus", (a,), (data,), bwd)
    return out


def gelu(a) -> Tensor:
    """Smooth gated activation (tanh form), built from primitives."""
    a = as_tensor(a)
    c = 0.7978845608028654  # sqrt(2/pi)
    cubed = mul(mul(a, a), a)
    inner = mul(add(a, mul(cubed, 0.044715)), c)
    return mul(mul(a, 0.5), add(tanh(inner), 1.0))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(gs):
        g = gs[0]
        return g @ b.data.T, a.data.T @ g

    (out,) = make_op("matmul", (a, b), (data,), bwd)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _check_axis(a: Tensor, axis, name: str):
    if axis is None:
        if a.size == 0:
            raise ValueError(f"{name}: reduction over an empty tensor")
        return None
    if not isinstance(axis, (int, np.integer)):
        raise TypeError(f"{name}: axis must be an int or None")
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"{name}: axis {axis} out of range for {a.ndim}-D tensor")
    axis = int(axis) % a.ndim
    if a.shape[axis] == 0:
        raise ValueError(f"{name}: reduction over empty axis {axis}")
    return axis


def _spread(g: np.ndarray, axis, keepdims: bool, shape: tuple) -> np.ndarray:
    # Expand a reduced gradient back over the reduced axis.
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    elif axis is None:
        g = np.reshape(g, (1,) * len(shape))
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    ax = _check_axis(a, axis, "sum")
    data = a.data.sum(axis=ax, keepdims=keepdims)

    def bwd(gs):
        return (_spread(np.asarray(gs[0]), ax, keepdims, a.shape).copy(),)

    (out,) = make_op("sum", (a,), (np.asarray(data),), bwd)
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    ax = _check_axis(a, axis, "mean")
    count = a.size if ax is None else a.shape[ax]
    data = a.data.mean(axis=ax, keepdims=keepdims)

    def bwd(gs):
        return (_spread(np.asarray(gs[0]) / count, ax, keepdims, a.shape).copy(),)

    (out,) = make_op("mean", (a,), (np.asarray(data),), bwd)
    return out


def _extreme(a, axis, keepdims, pick, arg, name) -> Tensor:
    a = as_tensor(a)
    ax = _check_axis(a, axis, name)
    data = pick(a.data, axis=ax, keepdims=keepdims)

    def bwd(gs):
        g = np.asarray(gs[0])
        onehot = np.zeros(a.shape, dtype=a.data.dtype)
        if ax is None:
            # First occurrence in C order gets the whole gradient.
            onehot.flat[arg(a.data)] = 1.0
            return (onehot * g,)
        idx = arg(a.data, axis=ax)
        np.put_along_axis(onehot, np.expand_dims(idx, ax), 1.0, ax)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (onehot * g,)

    (out,) = make_op(name, (a,), (np.asarray(data),), bwd)
    return out


def tmax(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; gradient routes to the first argmax (ties broken by
    C-order position)."""
    return _extreme(a, axis, keepdims, np.max, np.argmax, "max")


def tmin(a, axis=None, keepdims=False) -> Tensor:
    return _extreme(a, axis, keepdims, np.min, np.argmin, "min")


def l2_norm(a, axis=None, keepdims=False) -> Tensor:
    """Euclidean norm along an axis, composed from primitives.

    The gradient at an exactly-zero slice is undefined (0/0); callers
    that normalize must add an epsilon to the result, not the input.
    """
    a = as_tensor(a)
    return sqrt(tsum(mul(a, a), axis=axis, keepdims=keepdims))


def softmax(a, axis: int) -> Tensor:
    """Numerically shifted softmax; the max subtraction contributes no
    gradient (the softmax Jacobian annihilates constants)."""
    a = as_tensor(a)
    shifted = sub(a, tmax(a, axis=axis, keepdims=True))
    e = exp(shifted)
    return div(e, tsum(e, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from None

    def bwd(gs):
        return (gs[0].reshape(a.shape),)

    (out,) = make_op("reshape", (a,), (data,), bwd)
    return out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(int(x) % a.ndim for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bwd(gs):
        return (np.transpose(gs[0], inv),)

    (out,) = make_op("transpose", (a,), (data,), bwd)
    return out


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of zero tensors")
    ax = int(axis) % ts[0].ndim
    try:
        data = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {e}") from None
    sizes = [t.shape[ax] for t in ts]

    def bwd(gs):
        g = gs[0]
        pieces = []
        off = 0
        for s in sizes:
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(off, off + s)
            pieces.append(g[tuple(sl)])
            off += s
        return tuple(pieces)

    (out,) = make_op("concat", tuple(ts), (data,), bwd)
    return out


def getitem(a, key) -> Tensor:
    """Basic slicing (ints and unit-step slices). Integer indices drop
    their axis, like numpy."""
    a = as_tensor(a)
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > a.ndim:
        raise IndexError(f"too many indices for {a.ndim}-D tensor")
    slices = []
    squeeze = []
    for i, k in enumerate(key):
        if isinstance(k, (int, np.integer)):
            k = int(k)
            if not -a.shape[i] <= k < a.shape[i]:
                raise IndexError(f"index {k} out of bounds for axis {i} (size {a.shape[i]})")
            k %= a.shape[i]
            slices.append(slice(k, k + 1))
            squeeze.append(i)
        elif isinstance(k, slice):
            if k.step not in (None, 1):
                raise ValueError("only unit-step slices are supported")
            slices.append(k)
        else:
            raise TypeError(f"unsupported index {k!r}")
    idx = tuple(slices) + (slice(None),) * (a.ndim - len(slices))
    data = a.data[idx]
    if squeeze:
        data = np.squeeze(data, axis=tuple(squeeze))

    def bwd(gs):
        g = gs[0]
        if squeeze:
            g = np.expand_dims(g, axis=tuple(squeeze))
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    (out,) = make_op("slice", (a,), (data,), bwd)
    return out


def pad_axis_end(a, axis: int, count: int) -> Tensor:
    """Append ``count`` zeros along ``axis``."""
    a = as_tensor(a)
    if count < 0:
        raise ValueError("pad_axis_end: negative pad")
    ax = int(axis) % a.ndim
    if count == 0:
        (out,) = make_op("pad", (a,), (a.data.copy(),), lambda gs: (gs[0],))
        return out
    widths = [(0, 0)] * a.ndim
    widths[ax] = (0, count)
    data = np.pad(a.data, widths)
    orig = a.shape[ax]

    def bwd(gs):
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(0, orig)
        return (gs[0][tuple(sl)].copy(),)

    (out,) = make_op("pad", (a,), (data,), bwd)
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root_rec: OpRecord) -> list:
    """Iterative post-order over op records reachable through parents.

    The returned list is a topological order: every record's producing
    ancestors appear before it, so the reversed list visits each op
    exactly once with all its output gradients already accumulated.
    """
    order = []
    seen = set()
    stack = [(root_rec, False)]
    while stack:
        rec, expanded = stack.pop()
        if expanded:
            order.append(rec)
            continue
        if id(rec) in seen:
            continue
        seen.add(id(rec))
        stack.append((rec, True))
        for p in rec.parents:
            if p.creator is not None and id(p.creator) not in seen:
                stack.append((p.creator, False))
    return order


def backward(root: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``.grad``.

    ``root`` must be scalar-valued (a single element) unless an explicit
    seed gradient of matching shape is supplied.
    """
    if root.creator is None:
        warnings.warn("backward called on a detached tensor; nothing to do")
        return
    if grad is None:
        if root.size != 1:
            raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
        seed = np.ones(root.shape, dtype=root.data.dtype)
    else:
        seed = np.asarray(grad, dtype=root.data.dtype)
        if seed.shape != root.shape:
            raise GraphError(f"seed gradient shape {seed.shape} != root shape {root.shape}")

    order = _toposort(root.creator)
    grads: dict = {id(root): seed}

    for rec in reversed(order):
        out_grads = tuple(grads.pop(id(o), None) for o in rec.outputs)
        if all(g is None for g in out_grads):
            continue
        parent_grads = rec.backward_fn(out_grads)
        if len(parent_grads) != len(rec.parents):
            raise GraphError(f"op '{rec.name}' returned {len(parent_grads)} gradients "
                             f"for {len(rec.parents)} parents")
        for p, g in zip(rec.parents, parent_grads):
            if g is None or not p.requires_grad:
                continue
            g = np.asarray(g)
            if g.shape != p.shape:
                raise GraphError(f"op '{rec.name}' produced gradient shape {g.shape} "
                                 f"for parent shape {p.shape}")
            if p.creator is None:
                p.grad = g.astype(p.data.dtype, copy=True) if p.grad is None else p.grad + g
            else:
                prev = grads.get(id(p))
                grads[id(p)] = g if prev is None else prev + g


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def zeros(shape, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype if dtype is not None else _default_dtype),
                  requires_grad=requires_grad)

def ones(shape, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype if dtype is not None else _default_dtype),
                  requires_grad=requires_grad)

def full(shape, value, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype if dtype is not None else _default_dtype),
                  requires_grad=requires_grad)
