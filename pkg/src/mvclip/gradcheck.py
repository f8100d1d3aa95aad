"""Central finite differences and gradient comparison."""

from __future__ import annotations

from typing import Callable

import numpy as np


def central_difference(
    func: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Numerical gradient of a scalar function by central differences.

    Every coordinate of ``x`` is perturbed by ``+eps`` and ``-eps`` in turn.
    ``x`` is restored before returning.

    Args:
        func: Callable mapping an array shaped like ``x`` to a float.
        x: Point of evaluation. Modified in place during the sweep.
        eps: Step size.

    Returns:
        Array shaped like ``x`` holding ``(f(x+eps) - f(x-eps)) / (2 eps)``.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + eps
        fplus = func(x)
        flat[idx] = orig - eps
        fminus = func(x)
        flat[idx] = orig
        gflat[idx] = (fplus - fminus) / (2.0 * eps)
    return grad


def max_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1.0
) -> float:
    """Largest coordinate-wise error ``|a - n| / max(|a|, |n|, floor)``.

    With ``floor=1`` the measure is relative for coordinates of magnitude
    above one and absolute below, so vanishing gradient entries (saturated
    softmax, stationary points) do not turn rounding noise into a failure.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
