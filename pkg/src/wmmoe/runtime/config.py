"""Training configuration and JSON/flag loading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

from ..corpus import CurationConfig
from ..model import ModelConfig


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    t_max: int = 150
    eta_min: float = 5e-6
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    n_experts: int = 4
    n_blocks: int = 2
    n_modes: int = 6
    d_emb: int = 32
    heads: int = 4
    expert_hidden: int = 64
    backbone_width: int = 64
    backbone_seed: int = 1234
    dropout: float = 0.1
    routed: bool = True
    loss_profile: str = "nuscenes"
    lambda1: float = 1.0
    lambda2: float = 0.5
    gamma1: float = 1.0
    gamma2: float = 1.0
    clip_norm: float = 5.0
    dtype: str = "float32"
    eval_g: int = 5

    def __post_init__(self):
        for k in ("learning_rate", "t_max", "batch_size", "n_experts", "n_blocks", "n_modes", "d_emb", "clip_norm"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.eta_min < self.learning_rate:
            raise ValueError("need 0 <= eta_min < learning_rate")
        if self.loss_profile not in ("nuscenes", "rmse"):
            raise ValueError(f"unknown loss_profile {self.loss_profile!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def model_config(self, history: int = 5, t_f: int = 12) -> ModelConfig:
        return ModelConfig(
            d_emb=self.d_emb, heads=self.heads, n_modes=self.n_modes, n_experts=self.n_experts,
            n_blocks=self.n_blocks, expert_hidden=self.expert_hidden, history=history, t_f=t_f,
            dropout=self.dropout, backbone_width=self.backbone_width, backbone_seed=self.backbone_seed,
            routed=self.routed,
        )

    def loss_weights(self) -> dict:
        if self.loss_profile == "nuscenes":
            return {"lam1": self.lambda1, "lam2": self.lambda2}
        return {"gamma1": self.gamma1, "gamma2": self.gamma2}

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(typ, raw):
    if typ in (bool, "bool"):
        if isinstance(raw, bool):
            return raw
        return str(raw).lower() in ("1", "true", "yes", "on")
    return {"int": int, "float": float, "str": str}.get(typ if isinstance(typ, str) else typ.__name__, str)(raw)


def config_fields(cls) -> list:
    return [f for f in fields(cls)]


def load_config(cls, path: str | Path | None = None, overrides: dict | None = None):
    """Build ``cls`` from the same-named keys of a JSON file, then apply
    non-None overrides. Unknown keys that belong to neither config are an
    error."""
    data = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(TrainConfig)} | {f.name for f in fields(CurationConfig)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        names = {f.name for f in fields(cls)}
        data = {k: v for k, v in raw.items() if k in names}
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    typed = {}
    for f in fields(cls):
        if f.name in data:
            typed[f.name] = _coerce(f.type, data[f.name])
    return cls(**typed)
