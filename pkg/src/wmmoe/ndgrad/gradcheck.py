"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .core import Tape, Tensor, backward, no_grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``.

    Gradients smaller than ``floor`` are effectively compared on an absolute
    scale, which keeps exactly-zero gradients from reporting round-off as 100%.
    """
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / max(scale, floor))


def check_gradients(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-12,
) -> dict[str, float]:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` must be deterministic. With ``max_coords`` set, only that many
    randomly chosen coordinates per tensor are perturbed.
    """
    with Tape() as tape:
        loss = fn()
    grads = backward(loss, tape)
    gen = np.random.default_rng(seed)
    out = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_coords is None or n <= max_coords else gen.choice(n, max_coords, replace=False)
        analytic = np.asarray(grads[p]).reshape(-1)[idx]
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                up = fn().item()
            flat[i] = orig - h
            with no_grad():
                down = fn().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        out[name] = relative_error(analytic, numeric, floor)
    return out
