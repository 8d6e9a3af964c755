"""Central finite-difference gradient checks.

Used by the test suite as the independent oracle for every analytic
backward rule. Run in float64; float32 differences are too noisy.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def rel_error(analytic, numeric) -> np.ndarray:
    """``|a - n| / max(1, |n|)`` elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def numeric_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``x.data``.

    ``coords`` restricts evaluation to a list of flat indices; other
    entries of the result are NaN.
    """
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    todo = range(flat.size) if coords is None else coords
    for i in todo:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f().data)
        flat[i] = orig - step
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(x.shape)


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def check_grads(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between analytic and numeric gradients.

    With ``max_coords`` only that many randomly chosen entries of each
    parameter are differenced.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
    grads = analytic_grads(f, params)
    worst = 0.0
    for p, g in zip(params, grads):
        coords = None
        if max_coords is not None and p.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(p.size, size=max_coords, replace=False)
        num = numeric_grad(f, p, step, coords)
        mask = ~np.isnan(num)
        if mask.any():
            worst = max(worst, float(rel_error(g[mask], num[mask]).max()))
    return worst


def check_directional(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    rng: np.random.Generator,
    step: float = 1e-5,
) -> float:
    """Relative error of the directional derivative along a random unit direction.

    Perturbs every parameter at once, so a single pair of forward
    evaluations checks the full gradient against ``<grad, v>``.
    """
    grads = analytic_grads(f, params)
    dirs = [rng.standard_normal(p.shape) for p in params]
    norm = np.sqrt(sum(float((v * v).sum()) for v in dirs))
    dirs = [v / norm for v in dirs]
    analytic = sum(float((g * v).sum()) for g, v in zip(grads, dirs))
    orig = [p.data.copy() for p in params]

    def shifted(sign):
        for p, o, v in zip(params, orig, dirs):
            p.data[...] = o + sign * step * v
        return float(f().data)

    try:
        numeric = (shifted(1) - shifted(-1)) / (2 * step)
    finally:
        for p, o in zip(params, orig):
            p.data[...] = o
    return float(rel_error(analytic, numeric))
