"""Central finite-difference oracle for gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, gradient


def numerical_gradient(
    fn: Callable[[], Tensor],
    param: Tensor,
    eps: float = 1e-4,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``param``.

    ``fn`` must rebuild its graph from ``param.data`` on every call. When
    ``indices`` is given only those entries are perturbed; the rest stay 0.
    """
    grad = np.zeros_like(param.data)
    coords = indices if indices is not None else list(np.ndindex(param.shape))
    for idx in coords:
        orig = param.data[idx]
        param.data[idx] = orig + eps
        plus = fn().item()
        param.data[idx] = orig - eps
        minus = fn().item()
        param.data[idx] = orig
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """||a - n|| / max(||a||, ||n||), with a tiny floor for all-zero gradients."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-10,
) -> list[float]:
    """Relative error between analytic and central-difference gradients, per parameter.

    With ``max_entries`` each parameter is probed on a random subset of entries
    and the comparison is restricted to that subset. ``floor`` is the gradient
    norm below which the error is effectively measured in absolute terms.
    """
    analytic = gradient(fn(), params)
    rng = rng or np.random.default_rng(0)
    errors = []
    for p, a in zip(params, analytic):
        all_idx = list(np.ndindex(p.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            idx = [all_idx[i] for i in sorted(pick)]
        else:
            idx = all_idx
        numeric = numerical_gradient(fn, p, eps, idx)
        sel = tuple(np.array(idx).T)
        errors.append(relative_error(a[sel], numeric[sel], floor))
    return errors
