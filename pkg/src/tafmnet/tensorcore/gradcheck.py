"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..exceptions import NonDeterministicFunction, NonScalarRoot
from .tensor import Tensor, backward, no_grad


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Return the max relative error between tape and central-difference gradients.

    ``x`` must be a grad-requiring leaf. The relative error per coordinate
    uses the denominator ``max(|analytic|, |numeric|, 1e-8)``. With
    ``max_coords`` only a seeded random subset of coordinates is probed.
    """
    if not x.requires_grad or not x.is_leaf:
        raise ValueError("x must be a leaf tensor with requires_grad=True")
    x.grad = None
    root = f(x)
    if root.size != 1:
        raise NonScalarRoot("f must return a scalar")
    with no_grad():
        again = f(x)
    if not np.array_equal(root.data, again.data):
        raise NonDeterministicFunction("f(x) differs between two evaluations")
    backward(root)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_coords, replace=False))
    worst = 0.0
    with no_grad():
        for k in coords:
            orig = flat[k]
            flat[k] = orig + step
            fp = float(f(x).data)
            flat[k] = orig - step
            fm = float(f(x).data)
            flat[k] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
