"""End-to-end forecaster: perception, memory, decision."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .decision import Decision, TrajectoryForecast
from .memory import Memory
from .ndgrad.core import ConfigurationError, Tensor
from .ndgrad.nn import Module
from .perception import Perception, SceneBatch


@dataclass(frozen=True)
class ModelConfig:
    d_emb: int = 64
    heads: int = 4
    n_modes: int = 10
    n_experts: int = 4
    n_blocks: int = 4
    expert_hidden: int = 128
    history: int = 5
    t_f: int = 12
    dropout: float = 0.1
    bev_channels: int = 3
    backbone_width: int = 128
    backbone_seed: int = 1234
    d_state: int = 8
    routed: bool = True
    coord_scale: float = 2.0

    def __post_init__(self):
        for k in ("d_emb", "heads", "n_modes", "n_experts", "n_blocks", "history", "t_f"):
            if getattr(self, k) < 1:
                raise ConfigurationError(f"{k} must be positive")
        if self.d_emb % self.heads:
            raise ConfigurationError(f"d_emb {self.d_emb} not divisible by {self.heads} heads")

    def to_dict(self) -> dict:
        return asdict(self)


class WMMoE(Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        c = config
        self.config = c
        self.perception = Perception(c.d_emb, c.heads, c.dropout, c.bev_channels, c.history)
        self.memory = Memory(c.d_emb, c.heads, c.n_modes, c.history, c.t_f, c.backbone_width, c.backbone_seed, c.dropout)
        self.decision = Decision(c.d_emb, c.heads, c.n_experts, c.n_blocks, c.expert_hidden, c.dropout, c.routed,
                                 c.d_state, c.coord_scale)

    def forward(self, batch: SceneBatch, top_k: int | None = None) -> TrajectoryForecast:
        enc = self.perception(batch)
        q_mode = self.memory.intention_refine(enc)
        lang = self.memory.language_features(enc)
        context = enc.t_enc[:, -1, :]
        return self.decision(q_mode, lang.t_llm, enc.v_enc, context, top_k)

    @property
    def gate_trace(self):
        return self.decision.trace


def build_model(config: ModelConfig, seed: int, dtype=np.float64) -> WMMoE:
    return WMMoE(config).initialize(seed).to_dtype(dtype)
