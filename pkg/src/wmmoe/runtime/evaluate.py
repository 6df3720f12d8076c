"""Batched inference and metric reports, overall and per scenario class."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..model import WMMoE
from ..ndgrad import no_grad
from ..objectives import MISS_THRESHOLD_M, MetricReport, evaluate_forecasts
from ..scenes import Scene
from .data import iter_batches, prepare_scenes


@dataclass
class Predictions:
    mu: np.ndarray  # [S, K_n, t_f, 2]
    probs: np.ndarray  # [S, K_n]
    gt: np.ndarray  # [S, t_f, 2]
    labels: list
    ids: list
    gates: list = field(default_factory=list)  # per block [S, K] token-averaged
    gate_sums: list = field(default_factory=list)  # per block max |sum_k p - 1|


def predict(model: WMMoE, scenes: Sequence[Scene], batch_size: int = 64, top_k: int | None = None,
            dtype=None) -> Predictions:
    """Eval-mode forecasts for prepared (target-frame, rasterized) scenes."""
    model.eval()
    dtype = dtype or next(iter(model.trainable().values())).dtype
    mus, probs, gts, labels, ids = [], [], [], [], []
    gates: list[list] = []
    dev: list[float] = []
    with no_grad():
        for _, batch in iter_batches(scenes, batch_size, dtype=dtype):
            fc = model(batch, top_k=top_k)
            mus.append(fc.mu.data)
            probs.append(fc.probs.data)
            gts.append(batch.future)
            labels += batch.labels
            ids += batch.ids
            trace = model.gate_trace.gates
            if not gates:
                gates = [[] for _ in trace]
                dev = [0.0 for _ in trace]
            for l, p in enumerate(trace):
                gates[l].append(p.mean(axis=1))
                dev[l] = max(dev[l], float(np.abs(p.sum(axis=-1) - 1.0).max()))
    return Predictions(np.concatenate(mus), np.concatenate(probs), np.concatenate(gts), labels, ids,
                       [np.concatenate(g) for g in gates], dev)


@dataclass
class EvalResult:
    overall: MetricReport
    by_class: dict[str, MetricReport]
    predictions: Predictions

    def rows(self) -> list[dict]:
        return self.overall.rows()

    def class_rows(self) -> list[dict]:
        return [{"scenario": c, **r} for c, rep in self.by_class.items() for r in rep.rows()]


def evaluate_prepared(model: WMMoE, scenes: Sequence[Scene], gs=(1, 5), top_k: int | None = None,
                      horizons=(), batch_size: int = 64, dtype=None,
                      threshold: float = MISS_THRESHOLD_M) -> EvalResult:
    if not gs:
        raise ValueError("need at least one g")
    n_modes = model.config.n_modes
    bad = [g for g in gs if g > n_modes or g < 1]
    if bad:
        raise ValueError(f"g values {bad} outside 1..{n_modes} (the model's mode count)")
    pred = predict(model, scenes, batch_size, top_k, dtype)
    overall = evaluate_forecasts(pred.mu, pred.gt, pred.probs, gs, horizons, threshold)
    by_class = {}
    labels = np.asarray([lab if lab is not None else "unlabelled" for lab in pred.labels], dtype=object)
    for c in dict.fromkeys(labels):
        idx = np.flatnonzero(labels == c)
        by_class[c] = evaluate_forecasts(pred.mu[idx], pred.gt[idx], pred.probs[idx], gs, horizons, threshold)
    return EvalResult(overall, by_class, pred)


def evaluate(model: WMMoE, scenes: Sequence[Scene], gs=(1, 5), top_k: int | None = None, horizons=(),
             batch_size: int = 64, dtype=None) -> EvalResult:
    """Metrics on raw (world-frame) scenes."""
    return evaluate_prepared(model, prepare_scenes(scenes), gs, top_k, horizons, batch_size, dtype)


def write_rows(rows: Sequence[dict], fields: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})
