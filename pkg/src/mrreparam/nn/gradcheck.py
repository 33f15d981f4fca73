"""Central finite-difference oracle for the tape's gradients.

The oracle only evaluates forward passes; it never looks at the backward
closures it is used to check.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(loss_fn: Callable[[], float], arr: np.ndarray, eps: float = 1e-6,
                   indices: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """d loss / d arr by central differences, perturbing ``arr`` in place.

    With ``indices`` only those entries are probed; the rest stay zero.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    it = indices if indices is not None else list(np.ndindex(*arr.shape))
    for idx in it:
        orig = arr[idx]
        arr[idx] = orig + eps
        fp = loss_fn()
        arr[idx] = orig - eps
        fm = loss_fn()
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm((analytic - numeric).ravel())
    den = max(np.linalg.norm(analytic.ravel()), np.linalg.norm(numeric.ravel()), 1e-12)
    return float(num / den)


def check_gradients(forward: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-6,
                    max_probes: int | None = None, rng: np.random.Generator | None = None) -> list[float]:
    """Relative error between tape and finite-difference gradients per leaf.

    ``forward`` must rebuild the graph from the current ``leaves`` data and
    return a scalar Tensor.  ``max_probes`` limits the probed entries per
    leaf to a random subset.
    """
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    backward(forward())
    analytic = [np.array(leaf.grad, dtype=np.float64) for leaf in leaves]

    def scalar() -> float:
        return float(forward().data)

    errors = []
    rng = rng or np.random.default_rng(0)
    for leaf, a in zip(leaves, analytic):
        idx = None
        if max_probes is not None and leaf.data.size > max_probes:
            flat = rng.choice(leaf.data.size, size=max_probes, replace=False)
            idx = [np.unravel_index(i, leaf.shape) for i in flat]
        n = numerical_grad(scalar, leaf.data, eps, idx)
        if idx is not None:
            sel = tuple(np.array(i) for i in zip(*idx))
            errors.append(relative_error(a[sel], n[sel]))
        else:
            errors.append(relative_error(a, n))
    return errors
