"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, 1e-8)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(fn: Callable[[], Tensor], array: np.ndarray, h: float = DEFAULT_STEP,
                       indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``array`` (perturbed in place).

    When ``indices`` is given only those entries are filled; the rest stay NaN.
    """
    grad = np.full(array.shape, np.nan) if indices is not None else np.zeros(array.shape)
    it = indices if indices is not None else np.ndindex(*array.shape)
    with no_grad():
        for idx in it:
            orig = array[idx]
            array[idx] = orig + h
            fp = fn().item()
            array[idx] = orig - h
            fm = fn().item()
            array[idx] = orig
            grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(fn: Callable[[], Tensor], tensors: dict[str, Tensor], h: float = DEFAULT_STEP,
                    max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare backprop gradients of scalar ``fn()`` against central differences.

    ``fn`` must rebuild its graph from the current values of ``tensors`` on
    every call (and re-seed any randomness) so both routes see the same
    function. Returns the maximum relative error per named tensor.

    ``max_entries`` caps how many entries per tensor are probed; the subset is
    drawn from ``rng``. ``None`` checks every entry.
    """
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    loss = fn()
    backward(loss)
    errors = {}
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        indices = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(t.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, t.shape) for i in flat]
        numeric = numerical_gradient(fn, t.data, h, indices)
        mask = ~np.isnan(numeric)
        errors[name] = float(relative_error(analytic[mask], numeric[mask]).max(initial=0.0))
    return errors
