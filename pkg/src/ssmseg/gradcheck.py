"""Central finite-difference gradient checking.

The harness is the independent route against which every backward rule
is judged: perturb one scalar entry of one leaf at a time, rerun the
whole forward, and compare the symmetric difference quotient against the
gradient the tape produced. Slow by construction, so it is pointed at
tiny models, at float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class CheckRow:
    name: str
    max_rel_err: float
    worst_index: tuple
    ok: bool


def finite_difference(loss_fn: Callable[[], float], leaf: Tensor, step: float = 1e-5) -> np.ndarray:
    """d(loss)/d(leaf) by central differences, one entry at a time.

    ``loss_fn`` must rebuild the forward pass from current leaf data and
    return a python float. The leaf's data is restored exactly.
    """
    flat = leaf.data.reshape(-1)
    grad = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            flat[i] = orig - step
            lo = loss_fn()
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(leaf.shape)


def relative_errors(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_ad - g_fd) / (np.abs(g_ad) + np.abs(g_fd) + 1e-8)


def check_leaves(loss_fn: Callable[[], float],
                 leaves: Dict[str, Tensor],
                 backward_fn: Callable[[], None],
                 step: float = 1e-5,
                 tol: float = 1e-4) -> List[CheckRow]:
    """Compare tape gradients against finite differences for every leaf.

    ``backward_fn`` runs one forward+backward populating ``leaf.grad``.
    Returns one row per leaf; a row is a plain report, nothing raises,
    so a corrupted rule shows up as ``ok=False`` rather than an error.
    """
    for t in leaves.values():
        t.zero_grad()
    backward_fn()
    rows: List[CheckRow] = []
    for name, leaf in leaves.items():
        if leaf.grad is None:
            g_ad = np.zeros_like(leaf.data)
        else:
            g_ad = leaf.grad
        g_fd = finite_difference(loss_fn, leaf, step=step)
        rel = relative_errors(g_ad, g_fd)
        worst = np.unravel_index(np.argmax(rel), rel.shape) if rel.size else ()
        worst_val = float(rel.max()) if rel.size else 0.0
        rows.append(CheckRow(name, worst_val, tuple(int(i) for i in worst), worst_val < tol))
    return rows


def format_report(rows: List[CheckRow]) -> str:
    lines = ["leaf                                     max relative error   status"]
    for r in rows:
        status = "ok" if r.ok else "FAIL"
        lines.append(f"{r.name:<40} {r.max_rel_err:<20.3e} {status}")
    return "\n".join(lines)
