"""Expert-gate telemetry and a label-permutation test for
scenario-dependent routing."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..model import WMMoE
from ..ndgrad import rng_stream
from ..scenes import Scene
from .evaluate import Predictions, predict

ROUTE_FIELDS = ("block", "expert", "scenario", "mean_weight", "token_count")


class GateSumError(AssertionError):
    pass


def route_stats(model: WMMoE, scenes: Sequence[Scene], tol: float = 1e-9, batch_size: int = 64,
                top_k: int | None = None) -> tuple[list[dict], Predictions]:
    """Mean gate weight per (block, expert, scenario).

    Runs in float64 (the model is cast in place) and checks that every
    token's gate vector sums to one within ``tol``.
    """
    model.to_dtype(np.float64)
    pred = predict(model, scenes, batch_size, top_k, np.float64)
    worst = max(pred.gate_sums) if pred.gate_sums else 0.0
    if worst > tol:
        raise GateSumError(f"gate vectors deviate from the simplex by {worst:.3g} > {tol}")
    tokens = model.config.t_f * model.config.n_modes
    labels = np.asarray([lab if lab is not None else "unlabelled" for lab in pred.labels], dtype=object)
    rows = []
    for b, g in enumerate(pred.gates):
        for c in dict.fromkeys(labels):
            idx = labels == c
            m = g[idx].mean(axis=0)
            for e in range(g.shape[1]):
                rows.append({"block": b, "expert": e, "scenario": c, "mean_weight": float(m[e]),
                             "token_count": int(idx.sum()) * tokens})
    return rows, pred


def _js(p: np.ndarray, q: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    p, q = p + eps, q + eps
    m = 0.5 * (p + q)
    return 0.5 * (p * np.log(p / m)).sum(-1) + 0.5 * (q * np.log(q / m)).sum(-1)


def gate_divergence(gates: Sequence[np.ndarray], labels: Sequence) -> float:
    """Class-size-weighted Jensen-Shannon divergence between each class's
    mean gate distribution and the pooled one, summed over blocks.

    ``gates`` holds one ``[S, K]`` array of per-scene mean gates per block.
    """
    labels = np.asarray(labels, dtype=object)
    total = 0.0
    for g in gates:
        pooled = g.mean(axis=0)
        for c in dict.fromkeys(labels):
            idx = labels == c
            total += idx.mean() * float(_js(g[idx].mean(axis=0), pooled))
    return total


def permutation_test(gates, labels, n_perm: int = 200, seed: int = 0, q: float = 95.0) -> tuple[float, float, float]:
    """Observed divergence, the ``q``-th percentile of its label-shuffled
    null, and the permutation p-value."""
    obs = gate_divergence(gates, labels)
    gen = rng_stream(seed, "route/permutation")
    labels = np.asarray(labels, dtype=object)
    null = np.array([gate_divergence(gates, labels[gen.permutation(len(labels))]) for _ in range(n_perm)])
    return obs, float(np.percentile(null, q)), float((1 + (null >= obs).sum()) / (n_perm + 1))
