"""Mode-query refinement and the temporal tokenizer around a frozen
sequence backbone."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndgrad import core as T
from .ndgrad.core import ConfigurationError, Tensor
from .ndgrad.nn import MLP, LayerNorm, Module, MultiHeadAttention, Parameter, TransformerBlock, sinusoid_table

BACKBONE_NAMESPACE = "backbone."


def positional_encode(x: Tensor, base: float = 10000.0) -> Tensor:
    """Add the sinusoid table along the second-to-last axis."""
    L, D = x.shape[-2:]
    return x + Tensor(sinusoid_table(L, D, base, dtype=x.dtype))


class IntentionRefiner(Module):
    """Three residual cross-attention stages: scene, then lanes, then agents.

    Each stage is ``q <- q + LN(attn(q, key, value))``. The scene stage uses
    the mode-tiled scene state as values and ``t_rep + PE(q)`` as keys. Lane
    and agent keys get ``PE(q)`` averaged over time, since their token axes
    do not line up with the query's.
    """

    def __init__(self, d: int, heads: int, n_modes: int, history: int, dropout: float = 0.1):
        if n_modes < 1:
            raise ConfigurationError("need at least one mode")
        self.n_modes, self.history = n_modes, history
        self.anchors = Parameter((n_modes, history, d), ("normal", 0.02))
        self.scene_attn = MultiHeadAttention(d, heads, dropout)
        self.lane_attn = MultiHeadAttention(d, heads, dropout)
        self.agent_attn = MultiHeadAttention(d, heads, dropout)
        self.scene_ln = LayerNorm(d)
        self.lane_ln = LayerNorm(d)
        self.agent_ln = LayerNorm(d)

    def stage_scene(self, q: Tensor, s_enc: Tensor) -> Tensor:
        B, Th, D = s_enc.shape
        t_rep = positional_encode(T.broadcast_to(T.expand_dims(s_enc, 1), (B, self.n_modes, Th, D)))
        key = t_rep + positional_encode(self.anchors)
        return q + self.scene_ln(self.scene_attn(q, key, t_rep))

    def _stage_tokens(self, q: Tensor, tokens: Tensor, mask, attn, ln) -> Tensor:
        B, K, Th, D = q.shape
        if tokens.shape[-2] == 0 or not np.asarray(mask).any():
            return q + ln(Tensor(np.zeros(q.shape, dtype=q.dtype)))
        pe = positional_encode(self.anchors).mean(axis=1)  # [K, D]
        L = tokens.shape[-2]
        tok = T.broadcast_to(T.expand_dims(tokens, 1), (B, K, L, D))
        key = tok + T.expand_dims(pe, 1)
        km = np.broadcast_to(np.asarray(mask, bool)[:, None, :], (B, K, L))
        return q + ln(attn(q, key, tok, key_mask=km))

    def stage_lanes(self, q, l_enc, lane_mask):
        return self._stage_tokens(q, l_enc, lane_mask, self.lane_attn, self.lane_ln)

    def stage_agents(self, q, n_enc, neighbor_mask):
        return self._stage_tokens(q, n_enc, neighbor_mask, self.agent_attn, self.agent_ln)

    def forward(self, s_enc: Tensor, l_enc: Tensor, lane_mask, n_enc: Tensor, neighbor_mask) -> Tensor:
        B, Th, D = s_enc.shape
        q = T.broadcast_to(self.anchors, (B, self.n_modes, Th, D))
        q = self.stage_scene(q, s_enc)
        q = self.stage_lanes(q, l_enc, lane_mask)
        return self.stage_agents(q, n_enc, neighbor_mask)


class ModeExpander(Module):
    """``[B, K_n, T, D] -> [B, t_f, K_n, D]``: time-averaged query tiled over
    the horizon plus a learned per-step offset (zero at init)."""

    def __init__(self, d: int, t_f: int):
        self.t_f = t_f
        self.step = Parameter((t_f, 1, d), "zeros")

    def forward(self, q: Tensor) -> Tensor:
        B, K, _, D = q.shape
        pooled = T.expand_dims(q.mean(axis=2), 1)  # [B, 1, K, D]
        return T.broadcast_to(pooled, (B, self.t_f, K, D)) + self.step


def normalize_tokens(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero mean and unit variance over the feature axis of each token."""
    return T.layer_norm(x, None, None, eps)


class FrozenBackbone(Module):
    """Seeded causal transformer whose weights never receive gradients."""

    def __init__(self, width: int = 128, heads: int = 4, blocks: int = 2, seed: int = 1234):
        if width % heads:
            raise ConfigurationError(f"backbone width {width} not divisible by {heads} heads")
        self.width, self.seed = width, seed
        self.blocks = [TransformerBlock(width, heads, 2 * width) for _ in range(blocks)]
        self.ln_f = LayerNorm(width)
        self.initialize(seed)

    def initialize(self, seed: int = 0, prefix: str = ""):
        # weights depend only on the backbone's own seed, never the model seed
        super().initialize(self.seed, BACKBONE_NAMESPACE)
        for p in self.parameters():
            p.requires_grad = False
        return self

    def forward(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-1] != self.width:
            raise ConfigurationError(f"backbone expects width {self.width}, got {tokens.shape[-1]}")
        h = tokens
        for blk in self.blocks:
            h = blk(h, causal=True)
        return self.ln_f(h)


@dataclass
class LangFeatures:
    t_llm: Tensor
    hidden: Tensor
    t_enc_norm: Tensor
    n_enc_norm: Tensor


class TemporalTokenizer(Module):
    def __init__(self, d: int, width: int, hidden: int = 64):
        self.mlp = MLP(2 * d, hidden, width)

    def forward(self, t_enc: Tensor, n_enc: Tensor, neighbor_mask) -> tuple[Tensor, Tensor, Tensor]:
        tn = normalize_tokens(t_enc)
        B, Th, D = t_enc.shape
        m = np.asarray(neighbor_mask, dtype=t_enc.dtype)
        if n_enc.shape[1] == 0:
            nn_ = n_enc
            summary = Tensor(np.zeros((B, D), dtype=t_enc.dtype))
        else:
            nn_ = normalize_tokens(n_enc) * m[..., None]
            count = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
            summary = nn_.sum(axis=1) / count
        rep = T.broadcast_to(T.expand_dims(summary, 1), (B, Th, D))
        return self.mlp(T.concat([tn, rep], axis=-1)), tn, nn_


class Memory(Module):
    """Mode queries plus language-style temporal features."""

    def __init__(self, d: int = 64, heads: int = 4, n_modes: int = 10, history: int = 5, t_f: int = 12,
                 backbone_width: int = 128, backbone_seed: int = 1234, dropout: float = 0.1):
        self.refiner = IntentionRefiner(d, heads, n_modes, history, dropout)
        self.expander = ModeExpander(d, t_f)
        self.tokenizer = TemporalTokenizer(d, backbone_width)
        self.backbone = FrozenBackbone(backbone_width, seed=backbone_seed)
        self.project = MLP(backbone_width, 64, d)

    def intention_refine(self, enc) -> Tensor:
        q = self.refiner(enc.s_enc, enc.l_enc, enc.lane_mask, enc.n_enc, enc.neighbor_mask)
        return self.expander(q)

    def language_features(self, enc) -> LangFeatures:
        tokens, tn, nn_ = self.tokenizer(enc.t_enc, enc.n_enc, enc.neighbor_mask)
        hidden = self.backbone(tokens)
        return LangFeatures(self.project(hidden), hidden, tn, nn_)
