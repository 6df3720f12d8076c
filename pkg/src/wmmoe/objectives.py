"""Training losses and forecast metrics.

Metric functions take plain arrays: ``pred [B, G, t_f, 2]``, ``gt
[B, t_f, 2]`` and optionally ``probs [B, G]`` used to keep the ``g`` most
likely modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ndgrad import core as T
from .ndgrad.core import ContractError, Tensor

MISS_THRESHOLD_M = 2.0


# ---------------------------------------------------------------------------
# losses


def winner_modes(mu: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Index of the mode with the smallest ADE for each sample."""
    ade = np.linalg.norm(mu - gt[:, None], axis=-1).mean(axis=-1)
    return np.argmin(ade, axis=1)


def _pick(x: Tensor, idx: np.ndarray) -> Tensor:
    return x[np.arange(len(idx)), idx]


def ade_loss(mu_w: Tensor, gt: np.ndarray, eps: float = 1e-9) -> Tensor:
    """Mean Euclidean error of the given trajectories ``[B, t_f, 2]``."""
    d = mu_w - Tensor(gt.astype(mu_w.dtype))
    return T.sqrt((d * d).sum(axis=-1) + eps).mean()


def laplace_nll(mu: Tensor, scale: Tensor, gt: np.ndarray) -> Tensor:
    """``log(2b) + |y - mu| / b`` averaged over steps, coordinates and batch."""
    if (scale.data <= 0).any():
        raise ContractError("Laplace scale must be positive")
    y = Tensor(np.asarray(gt, dtype=mu.dtype))
    return (T.log(scale * 2.0) + T.absolute(y - mu) / scale).mean()


def mode_cls_loss(probs: Tensor, winner: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean ``-log pi[winner]`` with ``pi`` clipped away from zero."""
    p = T.clip(_pick(probs, winner), eps, None)
    return -T.log(p).mean()


def mse_loss(mu_w: Tensor, gt: np.ndarray) -> Tensor:
    d = mu_w - Tensor(gt.astype(mu_w.dtype))
    return (d * d).sum(axis=-1).mean()


def combined_loss_nuscenes(l_ade, l_reg, l_cls, lam1: float = 1.0, lam2: float = 0.5):
    return l_ade + lam1 * l_reg + lam2 * l_cls


def combined_loss_rmse(l_mse, l_ce, gamma1: float = 1.0, gamma2: float = 1.0):
    return gamma1 * l_mse + gamma2 * l_ce


@dataclass
class LossReport:
    total: Tensor
    components: dict[str, float]
    weights: dict[str, float]
    winner: np.ndarray = field(repr=False, default=None)

    def row(self) -> dict[str, float]:
        return {"total": float(self.total.data), **self.components}


def forecast_loss(forecast, gt: np.ndarray, profile: str = "nuscenes", weights: dict | None = None) -> LossReport:
    """Winner-takes-all loss: the closest mode is regressed, the classifier
    is trained to pick it."""
    mu, scale, probs = forecast.mu, forecast.scale, forecast.probs
    win = winner_modes(mu.data, gt)
    mu_w, sc_w = _pick(mu, win), _pick(scale, win)
    l_cls = mode_cls_loss(probs, win)
    if profile == "nuscenes":
        w = {"lam1": 1.0, "lam2": 0.5, **(weights or {})}
        l_ade = ade_loss(mu_w, gt)
        l_reg = laplace_nll(mu_w, sc_w, gt)
        total = combined_loss_nuscenes(l_ade, l_reg, l_cls, w["lam1"], w["lam2"])
        comps = {"ade": float(l_ade.data), "reg": float(l_reg.data), "cls": float(l_cls.data)}
    elif profile == "rmse":
        w = {"gamma1": 1.0, "gamma2": 1.0, **(weights or {})}
        l_mse = mse_loss(mu_w, gt)
        total = combined_loss_rmse(l_mse, l_cls, w["gamma1"], w["gamma2"])
        comps = {"mse": float(l_mse.data), "cls": float(l_cls.data)}
    else:
        raise ValueError(f"unknown loss profile {profile!r}")
    return LossReport(total, comps, w, win)


# ---------------------------------------------------------------------------
# metrics


def top_modes(pred: np.ndarray, probs: np.ndarray | None, g: int) -> np.ndarray:
    """The ``g`` most likely modes per sample (all of them if ``probs`` is
    None and ``g`` equals the mode count)."""
    G = pred.shape[1]
    if g < 1:
        raise ValueError(f"g must be >= 1, got {g}")
    if g > G:
        raise ValueError(f"g={g} exceeds the {G} predicted modes")
    if probs is None:
        return pred[:, :g]
    idx = np.argsort(-probs, axis=1, kind="stable")[:, :g]
    return np.take_along_axis(pred, idx[:, :, None, None], axis=1)


def _displacement(pred, gt):
    return np.linalg.norm(pred - gt[:, None], axis=-1)  # [B, G, t_f]


def min_ade(pred, gt, g: int, probs=None) -> float:
    return float(_displacement(top_modes(pred, probs, g), gt).mean(axis=-1).min(axis=1).mean())


def min_fde(pred, gt, g: int, probs=None) -> float:
    return float(_displacement(top_modes(pred, probs, g), gt)[..., -1].min(axis=1).mean())


def miss_rate(pred, gt, g: int, probs=None, threshold: float = MISS_THRESHOLD_M) -> float:
    best = _displacement(top_modes(pred, probs, g), gt)[..., -1].min(axis=1)
    return float((best > threshold).mean())


def rmse(pred, gt, horizon: int | None = None, g: int = 1, probs=None) -> float:
    """Pooled RMSE: per sample, the mean squared displacement up to
    ``horizon`` steps is minimized over the top ``g`` modes; the root is
    taken after averaging over samples."""
    h = gt.shape[1] if horizon is None else horizon
    if not 1 <= h <= gt.shape[1]:
        raise ValueError(f"horizon {h} outside 1..{gt.shape[1]}")
    d2 = (_displacement(top_modes(pred, probs, g), gt)[..., :h] ** 2).mean(axis=-1)
    return float(np.sqrt(d2.min(axis=1).mean()))


@dataclass
class MetricReport:
    values: dict[tuple[str, int], float]
    n_samples: int
    threshold: float = MISS_THRESHOLD_M

    def rows(self):
        return [{"metric": m, "g": g, "value": v, "n_samples": self.n_samples} for (m, g), v in self.values.items()]


def evaluate_forecasts(pred, gt, probs, gs=(1, 5, 10), horizons=(), threshold: float = MISS_THRESHOLD_M) -> MetricReport:
    if not gs:
        raise ValueError("need at least one g")
    vals = {}
    for g in gs:
        vals[("minADE", g)] = min_ade(pred, gt, g, probs)
        vals[("minFDE", g)] = min_fde(pred, gt, g, probs)
        vals[("MR", g)] = miss_rate(pred, gt, g, probs, threshold)
    for h in horizons:
        vals[(f"RMSE@{h}", 1)] = rmse(pred, gt, h, 1, probs)
    return MetricReport(vals, int(gt.shape[0]), threshold)
