"""Feature fusion, temporal refinement, mixture-of-experts decoding and the
Laplace trajectory head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ndgrad import core as T
from .ndgrad.core import ConfigurationError, Tensor
from .ndgrad.nn import GRU, MLP, Conv, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, current_rng


class NoiseInjector(Module):
    """Adds a learned linear map of a standard-normal draw to each stream
    while training; identity in eval mode."""

    def __init__(self, d: int, std: float = 0.01):
        self.q_map = Linear(d, d, std=std)
        self.t_map = Linear(d, d, std=std)
        self.v_map = Linear(d, d, std=std)

    def _perturb(self, x: Tensor, lin: Linear) -> Tensor:
        gen = current_rng()
        if gen is None:
            raise ConfigurationError("noise injection in training mode needs an rng_scope")
        z = Tensor(gen.standard_normal(x.shape).astype(x.dtype))
        return x + lin(z)

    def forward(self, q_mode: Tensor, t_llm: Tensor, v_enc: Tensor):
        if not self.training:
            return q_mode, t_llm, v_enc
        return self._perturb(q_mode, self.q_map), self._perturb(t_llm, self.t_map), self._perturb(v_enc, self.v_map)


class CrossModalFusion(Module):
    """Mode queries attend to BEV tokens.

    The BEV tokens are the values; the keys are the same tokens gated by the
    time-pooled language features, ``v * (1 + W t)``. The attention output is
    added back to the query.
    """

    def __init__(self, d: int, heads: int, dropout: float = 0.1):
        self.attn = MultiHeadAttention(d, heads, dropout)
        self.gate = Linear(d, d, std=0.0)

    def forward(self, t_llm: Tensor, v_enc: Tensor, q_mode: Tensor, bev_mask=None) -> Tensor:
        B, F, K, D = q_mode.shape
        g = 1.0 + self.gate(t_llm.mean(axis=1))  # [B, D]
        keys = v_enc * T.expand_dims(g, 1)
        q = q_mode.reshape(B, F * K, D)
        out = self.attn(q, keys, v_enc, key_mask=bev_mask)
        return (q + out).reshape(B, F, K, D)


class TemporalConvRefiner(Module):
    """``leaky_relu(TCN_1d(x)) + TCN_2d(x) + x``.

    The 1D branch convolves over the horizon for each mode; the 2D branch
    treats (horizon, mode) as an image. Both stack three kernel-3 layers with
    dilations 1, 2, 4; every layer after the first is residual.
    """

    dilations = (1, 2, 4)

    def __init__(self, d: int, kernel: int = 3):
        self.kernel = kernel
        self.conv1d = [Conv(1, d, d, kernel, dil) for dil in self.dilations]
        self.conv2d = [Conv(2, d, d, kernel, dil) for dil in self.dilations]

    @classmethod
    def receptive_field(cls, kernel: int = 3) -> int:
        return 1 + (kernel - 1) * sum(cls.dilations)

    @staticmethod
    def _stack(convs, x: Tensor) -> Tensor:
        h = T.leaky_relu(convs[0](x))
        for c in convs[1:]:
            h = T.leaky_relu(c(h)) + h
        return h

    def branch_1d(self, x: Tensor) -> Tensor:
        # [B, F, K, D] -> per mode sequences [B, K, F, D]
        return self._stack(self.conv1d, x.swapaxes(1, 2)).swapaxes(1, 2)

    def branch_2d(self, x: Tensor) -> Tensor:
        return self._stack(self.conv2d, x)

    def forward(self, x: Tensor) -> Tensor:
        return T.leaky_relu(self.branch_1d(x)) + self.branch_2d(x) + x


class SelectiveSSM(Module):
    """Pre-conv, SiLU, diagonal selective scan over the horizon, gated output.

    ``kernel`` sets the pre-conv footprint on the (horizon, mode) plane.
    """

    def __init__(self, d: int, kernel: int, d_state: int = 8):
        self.conv = Conv(2, d, d, kernel)
        self.delta = Linear(d, d, std=0.1 * d**-0.5)
        self.delta.bias.init = ("const", float(np.log(np.expm1(0.5))))
        self.B = Linear(d, d_state)
        self.C = Linear(d, d_state)
        self.A_log = Parameter((d, d_state), ("const", np.log(np.arange(1, d_state + 1, dtype=float))))
        self.skip = Parameter((d,), "ones")
        self.gate = Linear(d, d)
        self.out = Linear(d, d)

    def scan(self, u: Tensor) -> Tensor:
        """``u [B, F, K, D]`` scanned along ``F`` independently per mode."""
        Bn, F, K, D = u.shape
        seq = u.swapaxes(1, 2).reshape(Bn * K, F, D)
        delta = T.softplus(self.delta(seq))
        A = -T.exp(self.A_log)
        y = T.selective_scan(seq, delta, A, self.B(seq), self.C(seq)) + seq * self.skip
        return y.reshape(Bn, K, F, D).swapaxes(1, 2)

    def forward(self, x: Tensor) -> Tensor:
        u = T.silu(self.conv(x))
        y = self.scan(u) * T.silu(self.gate(x))
        return x + self.out(y)


class SSMRefiner(Module):
    """Sum of two selective-scan branches (3x3 and 1x1 pre-conv), each
    followed by a parameter-free layer norm."""

    def __init__(self, d: int, d_state: int = 8):
        self.m1 = SelectiveSSM(d, 3, d_state)
        self.m2 = SelectiveSSM(d, 1, d_state)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(self.m1(x)) + T.layer_norm(self.m2(x))


def topk_renormalize(p: np.ndarray, k: int) -> np.ndarray:
    """Keep the ``k`` largest weights of each row and rescale them to sum 1."""
    K = p.shape[-1]
    if not 1 <= k <= K:
        raise ConfigurationError(f"top-k needs 1 <= k <= {K}, got {k}")
    if k == K:
        return p
    idx = np.argsort(-p, axis=-1, kind="stable")[..., :k]
    keep = np.zeros(p.shape, bool)
    np.put_along_axis(keep, idx, True, axis=-1)
    q = np.where(keep, p, 0.0)
    return q / q.sum(axis=-1, keepdims=True)


class Router(Module):
    """Two-layer MLP gate with a softmax over experts."""

    def __init__(self, d: int, n_experts: int, hidden: int | None = None):
        self.n_experts = n_experts
        self.mlp = MLP(d, hidden or d, n_experts)

    def forward(self, x: Tensor, top_k: int | None = None) -> Tensor:
        p = T.softmax(self.mlp(x), axis=-1)
        if top_k is not None and top_k < self.n_experts:
            keep = topk_renormalize(p.data, top_k) > 0
            kept = p * keep.astype(p.dtype)
            p = kept / kept.sum(axis=-1, keepdims=True)
        return p


@dataclass
class GateRecord:
    block: int
    expert: int
    mean_weight: float
    scenario: str | None = None
    token_count: int = 0


@dataclass
class GateTrace:
    """Per-block gate arrays ``[B, M, K]`` from the last forward."""

    gates: list = field(default_factory=list)

    def records(self, labels=None) -> list[GateRecord]:
        out = []
        for l, p in enumerate(self.gates):
            B, M, K = p.shape
            groups = {None: np.arange(B)} if labels is None else {}
            if labels is not None:
                for lab in dict.fromkeys(labels):
                    groups[lab] = np.flatnonzero(np.asarray(labels, dtype=object) == lab)
            for lab, idx in groups.items():
                sel = p[idx].reshape(-1, K)
                for e in range(K):
                    out.append(GateRecord(l, e, float(sel[:, e].mean()), lab, sel.shape[0]))
        return out


class MoEBlock(Module):
    """``h_s = MSA(LN(h)) + h``, ``h_m = sum_i p_i E_i(LN(h_s)) + h_s``,
    ``h' = LN(h_m)``. With ``routed=False`` the block uses expert 0 alone,
    which is a plain pre-norm transformer block."""

    def __init__(self, d: int, heads: int, n_experts: int, hidden: int, dropout: float = 0.1, routed: bool = True):
        if n_experts < 1:
            raise ConfigurationError("need at least one expert")
        self.routed = routed
        self.ln_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, dropout)
        self.ln_ffn = LayerNorm(d)
        self.ln_out = LayerNorm(d)
        self.experts = [MLP(d, hidden, d, act="gelu") for _ in range(n_experts if routed else 1)]
        self.router = Router(d, n_experts) if routed else None
        self.last_gates: np.ndarray | None = None

    def forward(self, h: Tensor, top_k: int | None = None) -> Tensor:
        x = self.ln_attn(h)
        hs = self.attn(x, x, x) + h
        x = self.ln_ffn(hs)
        if self.router is None:
            mixed = self.experts[0](x)
            self.last_gates = np.ones((*x.shape[:-1], 1))
        else:
            p = self.router(x, top_k)
            self.last_gates = p.data
            mixed = None
            for i, e in enumerate(self.experts):
                w = p[..., i : i + 1]
                if top_k is not None and not (w.data > 0).any():
                    continue
                term = w * e(x)
                mixed = term if mixed is None else mixed + term
        return self.ln_out(mixed + hs)


@dataclass
class TrajectoryForecast:
    """``mu``/``scale`` ``[B, K_n, t_f, 2]`` in metres, ``probs [B, K_n]``."""

    mu: Tensor
    scale: Tensor
    logits: Tensor
    probs: Tensor

    def numpy(self):
        return self.mu.data, self.scale.data, self.probs.data


class TrajectoryDecoder(Module):
    """Per-mode GRU over the horizon on ``[h_N ; target context]``, then
    Laplace location/scale heads and a mode classifier.

    The location head emits per-step displacements (``coord_scale`` metres
    per unit) that are summed along the horizon into positions.
    """

    def __init__(self, d: int, coord_scale: float = 2.0, min_scale: float = 1e-3):
        self.gru = GRU(2 * d, d)
        self.loc = Linear(d, 2)
        self.scl = Linear(d, 2)
        self.cls = MLP(d, d, 1)
        self.coord_scale, self.min_scale = coord_scale, min_scale

    def forward(self, h: Tensor, context: Tensor) -> TrajectoryForecast:
        B, F, K, D = h.shape
        seq = h.swapaxes(1, 2)  # [B, K, F, D]
        ctx = T.broadcast_to(T.expand_dims(T.expand_dims(context, 1), 1), (B, K, F, context.shape[-1]))
        out, _ = self.gru(T.concat([seq, ctx], axis=-1))
        tril = np.tril(np.ones((F, F), dtype=out.dtype))
        mu = T.matmul(Tensor(tril), self.loc(out) * self.coord_scale)
        scale = T.softplus(self.scl(out)) + self.min_scale
        logits = self.cls(seq.mean(axis=2)).reshape(B, K)
        return TrajectoryForecast(mu, scale, logits, T.softmax(logits, axis=-1))


class Decision(Module):
    def __init__(self, d: int = 64, heads: int = 4, n_experts: int = 4, n_blocks: int = 4, expert_hidden: int = 128,
                 dropout: float = 0.1, routed: bool = True, d_state: int = 8, coord_scale: float = 2.0):
        self.noise = NoiseInjector(d)
        self.fusion = CrossModalFusion(d, heads, dropout)
        self.tcn = TemporalConvRefiner(d)
        self.ssm = SSMRefiner(d, d_state)
        self.blocks = [MoEBlock(d, heads, n_experts, expert_hidden, dropout, routed) for _ in range(n_blocks)]
        self.decoder = TrajectoryDecoder(d, coord_scale)
        self.trace = GateTrace()

    def refine(self, q_mode: Tensor, t_llm: Tensor, v_enc: Tensor) -> Tensor:
        q, t, v = self.noise(q_mode, t_llm, v_enc)
        q_c = self.fusion(t, v, q)
        return self.ssm(self.tcn(q_c))

    def forward(self, q_mode: Tensor, t_llm: Tensor, v_enc: Tensor, context: Tensor, top_k: int | None = None) -> TrajectoryForecast:
        f_c = self.refine(q_mode, t_llm, v_enc)
        B, F, K, D = f_c.shape
        h = f_c.reshape(B, F * K, D)
        gates = []
        for blk in self.blocks:
            h = blk(h, top_k)
            gates.append(blk.last_gates)
        self.trace = GateTrace(gates)
        return self.decoder(h.reshape(B, F, K, D), context)
