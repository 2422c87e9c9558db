"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError
from .tensor import GradTape, Tensor, backward


@dataclass
class GradCheckReport:
    max_deviation: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray

    def __bool__(self) -> bool:
        return self.passed


def relative_deviation(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Largest elementwise relative gap between two gradients.

    Each element is compared relative to ``max(|a|, |n|)``, floored at ``floor``
    times the largest gradient magnitude so that entries many orders below the
    gradient's scale (where finite differences are pure round-off) do not
    dominate.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(floor * scale, 1e-12))
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ContractError(f"function under check must return a scalar, got shape {value.shape}")
    return float(value.data.reshape(-1)[0])


def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = _scalar(f(Tensor(x)))
        flat[i] = orig - step
        lo = _scalar(f(Tensor(x)))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def finite_difference_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5,
                            tol: float = 1e-4) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` against central differences."""
    if step <= 0:
        raise ContractError("step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    with GradTape():
        y = f(xt)
    _scalar(y)
    if y.requires_grad:
        backward(y)
        analytic = xt.grad.data if xt.grad is not None else np.zeros_like(x0)
    else:
        analytic = np.zeros_like(x0)
    numeric = numeric_gradient(f, x0, step)
    dev = relative_deviation(analytic, numeric)
    return GradCheckReport(dev, dev <= tol, np.array(analytic), numeric)
