"""Integrated Gradients along the straight line from a baseline to the input."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


def integrated_gradients(f: Callable[[Tensor], Tensor], x, baseline, steps: int = 64,
                         features: np.ndarray | None = None) -> np.ndarray:
    """Right-Riemann IG for a model ``f`` that maps (S, n) inputs to S scalar outputs.

    Only the coordinates listed in ``features`` are interpolated (all by
    default); the rest are held at ``x``. Returns attributions of shape (n,),
    zero outside ``features``.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    b = np.asarray(baseline, dtype=np.float64).reshape(-1)
    if x.shape != b.shape:
        raise T.ShapeError("integrated_gradients", x.shape, b.shape)
    sel = np.ones(x.size, dtype=bool)
    if features is not None:
        sel[:] = False
        sel[np.asarray(features, dtype=np.intp)] = True
    start = np.where(sel, b, x)
    alphas = np.arange(1, steps + 1, dtype=np.float64)[:, None] / steps
    path = Tensor(start + alphas * (x - start), requires_grad=True)
    out = f(path)
    if out.shape != (steps,):
        raise T.ShapeError("integrated_gradients", out.shape, (steps,), detail="one scalar per path point")
    if out.requires_grad:
        T.sum(out).backward()
    if path.grad is None:
        raise ValueError("integrated_gradients: target does not depend differentiably on the input")
    avg_grad = path.grad.mean(axis=0)
    return np.where(sel, (x - start) * avg_grad, 0.0)


def attribution_table(attributions: np.ndarray, names: list[str]) -> list[tuple[str, float, float]]:
    """(feature, mean |score| ..., percentage of total) sorted by importance.

    ``attributions`` is (n_samples, n_features); scores are averaged over
    samples after taking absolute values and expressed as percentages.
    """
    a = np.abs(np.asarray(attributions, dtype=np.float64))
    a = a.reshape(-1, a.shape[-1]).mean(axis=0)
    total = a.sum()
    pct = 100.0 * a / total if total > 0 else np.zeros_like(a)
    rows = [(n, float(s), float(p)) for n, s, p in zip(names, a, pct)]
    return sorted(rows, key=lambda r: -r[1])
