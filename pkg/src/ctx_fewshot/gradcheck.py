"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, default_dtype


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst_index: tuple | None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __bool__(self):
        return self.passed


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    value = np.asarray(value)
    if value.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {value.shape}")
    return float(value.reshape(()))


def grad_check(f, x: Tensor, eps: float = 1e-3, tol: float = 1e-2,
               max_coords: int | None = None, rng=None, floor: float = 1e-6,
               dtype=np.float64) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f(x)`` with central differences.

    ``x`` is evaluated (and temporarily cast) in ``dtype``; float64 keeps the
    difference quotients clear of float32 round-off so the relative tolerance
    measures the backward pass rather than the arithmetic. Each perturbed
    point is evaluated twice and must agree exactly. The per-element relative
    error is ``|a - n| / max(|a|, |n|, floor)``. The lower bound on ``eps`` is
    1e-4 for 32-bit evaluation and 1e-7 for 64-bit.
    """
    low = 1e-7 if np.dtype(dtype) == np.float64 else 1e-4
    if not low <= eps <= 1e-2:
        raise ValueError(f"grad_check: eps={eps} outside [{low:g}, 1e-2]")
    original = x.data
    original_grad = x.grad
    try:
        with default_dtype(dtype):
            x.data = original.astype(dtype)
            x.grad = None
            out = f(x)
            if not isinstance(out, Tensor):
                raise TypeError("grad_check: f must return a Tensor")
            out.backward()
            analytic = np.zeros_like(x.data) if x.grad is None else x.grad.astype(dtype)

            flat_size = x.data.size
            coords = np.arange(flat_size)
            if max_coords is not None and flat_size > max_coords:
                rng = np.random.default_rng(0) if rng is None else rng
                coords = np.sort(rng.choice(flat_size, size=max_coords, replace=False))

            worst, worst_idx = 0.0, None
            base = x.data.copy()
            for flat in coords:
                idx = np.unravel_index(flat, x.shape)
                values = []
                for delta in (eps, -eps):
                    x.data = base.copy()
                    x.data[idx] += delta
                    first = _scalar(f(x))
                    second = _scalar(f(x))
                    if first != second:
                        raise NonDeterministicError(
                            f"grad_check: f differs across repeated evaluations at {idx}")
                    values.append(first)
                numeric = (values[0] - values[1]) / (2 * eps)
                a = float(analytic[idx])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                if rel > worst:
                    worst, worst_idx = rel, tuple(int(i) for i in idx)
    finally:
        x.data = original
        x.grad = original_grad
    return GradCheckReport(worst, tol, len(coords), worst_idx)
