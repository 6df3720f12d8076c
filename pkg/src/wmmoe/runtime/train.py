"""Seeded training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..model import WMMoE, build_model
from ..ndgrad import NonFiniteError, Tape, parameters_checksum, rng_stream
from ..ndgrad.nn import rng_scope
from ..objectives import forecast_loss
from ..scenes import Scene
from .config import TrainConfig
from .data import iter_batches, prepare_scenes
from .evaluate import evaluate_prepared
from .optim import Adam, clip_global_norm, cosine_lr

LOG_FIELDS = ("epoch", "lr", "loss", "ade", "reg", "cls", "mse", "grad_norm", "val_minade")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: WMMoE
    config: TrainConfig
    log: list[dict] = field(default_factory=list)
    optimizer: Adam | None = None

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.log if r["epoch"] > 0]

    def checksum(self) -> str:
        return parameters_checksum(p.data for _, p in self.model.named_parameters())


def train(
    config: TrainConfig,
    scenes: Sequence[Scene],
    val_scenes: Sequence[Scene] | None = None,
    prepared: bool = False,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam with per-epoch cosine annealing and global-norm clipping.

    Batch order, dropout and noise draws all come from streams keyed by the
    config seed, so equal configs give equal loss curves. Row 0 of the log
    holds the untrained validation score.
    """
    if not scenes:
        raise ValueError("training corpus is empty")
    dtype = np.dtype(config.dtype).type
    train_set = list(scenes) if prepared else prepare_scenes(scenes)
    val_set = None
    if val_scenes:
        val_set = list(val_scenes) if prepared else prepare_scenes(val_scenes)
    s0 = train_set[0]
    model = build_model(config.model_config(s0.target.n_frames, s0.t_f), config.seed, dtype)
    params = model.trainable()
    opt = Adam(params, config.learning_rate)
    weights = config.loss_weights()
    result = TrainResult(model, config, [], opt)

    def val_score():
        if val_set is None:
            return float("nan")
        g = min(config.eval_g, config.n_modes)
        return evaluate_prepared(model, val_set, (g,), batch_size=64, dtype=dtype).overall.values[("minADE", g)]

    result.log.append({**dict.fromkeys(LOG_FIELDS, float("nan")), "epoch": 0, "val_minade": val_score()})
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.learning_rate, config.t_max, config.eta_min)
        order = rng_stream(config.seed, f"order/{epoch}").permutation(len(train_set))
        sums: dict[str, float] = {}
        n_batches = 0
        model.train()
        for bi, (sel, batch) in enumerate(iter_batches(train_set, config.batch_size, order, dtype)):
            batch_id = f"epoch {epoch + 1} batch {bi}"
            try:
                with rng_scope(rng_stream(config.seed, f"forward/{epoch}/{bi}")), Tape() as tape:
                    fc = model(batch)
                    rep = forecast_loss(fc, batch.future, config.loss_profile, weights)
                if not math.isfinite(float(rep.total.data)):
                    raise NonFiniteError("loss is not finite")
                grads = tape.backward(rep.total)
            except NonFiniteError as e:
                raise TrainingError(f"non-finite values at {batch_id} (scenes {[batch.ids[i] for i in range(len(sel))][:4]}...): {e}") from e
            g = {k: grads[p] for k, p in params.items()}
            norm = clip_global_norm(g, config.clip_norm)
            opt.step(g, lr)
            for k, v in {**rep.row(), "grad_norm": norm}.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        row = dict.fromkeys(LOG_FIELDS, float("nan"))
        row.update({k.replace("total", "loss"): v / n_batches for k, v in sums.items()})
        row.update({"epoch": epoch + 1, "lr": lr, "val_minade": val_score()})
        result.log.append(row)
        if progress:
            progress(row)
    model.eval()
    return result


def write_loss_log(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in LOG_FIELDS})
