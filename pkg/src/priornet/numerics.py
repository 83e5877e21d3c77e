"""Numerical primitives shared by the rest of the package.

Tensors are plain float64 numpy arrays in C (row-major) order.  The special
functions are evaluated by upward recurrence to x >= 6 followed by the
asymptotic (Stirling / de Moivre) series, which keeps the absolute error
below 1e-10 on the positive axis without pulling in scipy at runtime.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

Tensor = np.ndarray

EULER_GAMMA = 0.57721566490153286061
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_SHIFT_TO = 6.0


class DomainError(ValueError):
    """Argument outside the domain of a special function."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=np.float64)


def _check_positive(x: Tensor, name: str) -> None:
    if not np.all(x > 0):
        raise DomainError(f"{name} requires x > 0")


def _shift_up(x: Tensor):
    """Shift x up to >= 6; also return (mask, pre-shift value) for each step taken."""
    z = x.copy()
    shifts = []
    for _ in range(int(_SHIFT_TO)):
        m = z < _SHIFT_TO
        if not m.any():
            break
        shifts.append((m, z.copy()))
        z = np.where(m, z + 1.0, z)
    return z, shifts


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0 (scalar or array)."""
    scalar = np.isscalar(x)
    x = np.asarray(x, dtype=np.float64)
    _check_positive(x, "digamma")
    z, shifts = _shift_up(x)
    acc = np.zeros_like(z)
    for m, prev in shifts:
        acc = acc - np.where(m, 1.0 / prev, 0.0)
    r = 1.0 / z
    r2 = r * r
    series = r2 * (1.0 / 12 - r2 * (1.0 / 120 - r2 * (1.0 / 252 - r2 * (
        1.0 / 240 - r2 * (1.0 / 132 - r2 * (691.0 / 32760 - r2 / 12.0))))))
    out = acc + np.log(z) - 0.5 * r - series
    return float(out) if scalar else out


def trigamma(x):
    """psi'(x) for x > 0; needed for analytic gradients of the evidential terms."""
    scalar = np.isscalar(x)
    x = np.asarray(x, dtype=np.float64)
    _check_positive(x, "trigamma")
    z, shifts = _shift_up(x)
    acc = np.zeros_like(z)
    for m, prev in shifts:
        acc = acc + np.where(m, 1.0 / (prev * prev), 0.0)
    r = 1.0 / z
    r2 = r * r
    # 1/x + 1/(2x^2) + sum_k B_2k / x^(2k+1)
    series = r * r2 * (1.0 / 6 - r2 * (1.0 / 30 - r2 * (1.0 / 42 - r2 * (
        1.0 / 30 - r2 * (5.0 / 66 - r2 * (691.0 / 2730 - r2 * 7.0 / 6))))))
    out = acc + r + 0.5 * r2 + series
    return float(out) if scalar else out


def log_gamma(x):
    """ln Gamma(x) for x > 0 (scalar or array)."""
    scalar = np.isscalar(x)
    x = np.asarray(x, dtype=np.float64)
    _check_positive(x, "log_gamma")
    z, shifts = _shift_up(x)
    acc = np.zeros_like(z)
    for m, prev in shifts:
        acc = acc - np.where(m, np.log(np.where(m, prev, 1.0)), 0.0)
    r = 1.0 / z
    r2 = r * r
    series = r * (1.0 / 12 - r2 * (1.0 / 360 - r2 * (1.0 / 1260 - r2 * (
        1.0 / 1680 - r2 * (1.0 / 1188 - r2 * (691.0 / 360360 - r2 / 156.0))))))
    out = acc + (z - 0.5) * np.log(z) - z + _HALF_LOG_2PI + series
    return float(out) if scalar else out


def stable_softmax(v, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with the max subtracted first."""
    v = np.asarray(v, dtype=np.float64)
    ex = v - np.max(v, axis=axis, keepdims=True)
    np.exp(ex, out=ex)
    ex /= np.sum(ex, axis=axis, keepdims=True)
    return ex


def sigmoid(v) -> Tensor:
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softplus(v) -> Tensor:
    v = np.asarray(v, dtype=np.float64)
    return np.logaddexp(0.0, v)


def softplus_clipped(v, cap: float = 5.0) -> Tensor:
    """clip(softplus(v), 0, cap)."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    return np.clip(softplus(v), 0.0, cap)


def softplus_clipped_grad(v, cap: float = 5.0) -> Tensor:
    """Subgradient of :func:`softplus_clipped`: sigmoid below the cap, 0 on the plateau."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(softplus(v) < cap, sigmoid(v), 0.0)


def matmul(a, b) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def finite_difference_gradient(f: Callable[[Tensor], float], x, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class GradientCheckReport:
    max_abs_error: float
    max_rel_error: float
    num_points_checked: int
    points_skipped_near_nonsmoothness: int

    def to_dict(self) -> dict:
        return asdict(self)


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-8) -> tuple[float, float]:
    """(max abs error, max-norm relative error) between two gradients.

    The relative error is normwise: max|a - n| / max(max|a|, max|n|, floor),
    so coordinates with vanishing gradient do not blow the ratio up.
    """
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), floor)
    return diff, diff / scale
