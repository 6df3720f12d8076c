"""Layers built on the tensor ops.

Parameters carry their own init rule. :meth:`Module.initialize` draws each
parameter from a stream keyed by ``(seed, parameter path)``, so two models
that share a sub-module path and seed get identical weights for it no matter
what else they contain.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Iterator

import numpy as np

from . import core as T
from .rng import rng_stream
from .core import ConfigurationError, ContractError, DimensionError, Tensor

_forward_rng = threading.local()


@contextlib.contextmanager
def rng_scope(gen: np.random.Generator | None):
    """Make ``gen`` the source of dropout/noise draws for the enclosed forward."""
    prev = getattr(_forward_rng, "gen", None)
    _forward_rng.gen = gen
    try:
        yield
    finally:
        _forward_rng.gen = prev


def current_rng() -> np.random.Generator | None:
    return getattr(_forward_rng, "gen", None)


class Parameter(Tensor):
    __slots__ = ("init",)

    def __init__(self, shape, init=("normal", 0.02), requires_grad: bool = True, dtype=None):
        super().__init__(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)
        self.init = init

    def reset(self, gen: np.random.Generator) -> None:
        kind = self.init if isinstance(self.init, str) else self.init[0]
        shape, dtype = self.data.shape, self.data.dtype
        if kind == "zeros":
            v = np.zeros(shape)
        elif kind == "ones":
            v = np.ones(shape)
        elif kind == "normal":
            v = gen.normal(0.0, self.init[1], size=shape)
        elif kind == "uniform":
            b = self.init[1]
            v = gen.uniform(-b, b, size=shape)
        elif kind == "const":
            v = np.broadcast_to(np.asarray(self.init[1], dtype=float), shape).copy()
        else:
            raise ConfigurationError(f"unknown init {self.init!r}")
        self.data = v.astype(dtype)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for k, v in vars(self).items():
            if isinstance(v, Module):
                yield k, v
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield f"{k}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for k, v in vars(self).items():
            if isinstance(v, Parameter):
                yield prefix + k, v
        for k, m in self.children():
            yield from m.named_parameters(f"{prefix}{k}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> dict[str, Parameter]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, m in self.children():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def initialize(self, seed: int, prefix: str = "") -> "Module":
        for k, v in vars(self).items():
            if isinstance(v, Parameter):
                v.reset(rng_stream(seed, prefix + k))
        for k, m in self.children():
            m.initialize(seed, f"{prefix}{k}.")
        return self

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for n, p in own.items():
            arr = np.asarray(state[n])
            if arr.shape != p.data.shape:
                raise DimensionError(f"{n}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True, std: float | None = None):
        self.weight = Parameter((n_in, n_out), ("normal", std if std is not None else n_in**-0.5))
        self.bias = Parameter((n_out,), "zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, affine: bool = True):
        self.eps = eps
        self.gain = Parameter((d,), "ones") if affine else None
        self.bias = Parameter((d,), "zeros") if affine else None

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, rate: float = 0.1):
        self.rate = rate

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate <= 0:
            return x
        gen = current_rng()
        if gen is None:
            raise ContractError("dropout in training mode needs an rng_scope")
        return T.dropout(x, self.rate, gen, True)


_ACTS = {
    "relu": T.relu,
    "gelu": T.gelu,
    "silu": T.silu,
    "tanh": T.tanh,
    "leaky_relu": T.leaky_relu,
}


class MLP(Module):
    """Two-layer perceptron: linear, activation, dropout, linear."""

    def __init__(self, n_in: int, hidden: int, n_out: int, act: str = "relu", dropout: float = 0.0):
        self.fc1 = Linear(n_in, hidden)
        self.fc2 = Linear(hidden, n_out)
        self.act = act
        self.drop = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.drop(_ACTS[self.act](self.fc1(x))))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head softmax.

    Inputs are batch-leading: ``query [..., Lq, D]``, ``key``/``value``
    ``[..., Lk, D]`` with identical leading axes. ``key_mask [..., Lk]`` marks
    valid keys; a query whose keys are all invalid produces a zero row.
    """

    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        if d % heads:
            raise ConfigurationError(f"model dim {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q_proj = Linear(d, d)
        self.k_proj = Linear(d, d)
        self.v_proj = Linear(d, d)
        self.o_proj = Linear(d, d)
        self.drop = Dropout(dropout)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, L, _ = x.shape
        x = x.reshape(*lead, L, self.heads, self.d // self.heads)
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return x.transpose(axes)

    def _merge(self, x: Tensor) -> Tensor:
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        x = x.transpose(axes)
        *lead, L, H, dh = x.shape
        return x.reshape(*lead, L, H * dh)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, key_mask=None, causal: bool = False) -> Tensor:
        if key.shape[:-1] != value.shape[:-1]:
            raise DimensionError(f"key/value lengths differ: {key.shape} vs {value.shape}")
        Lk = key.shape[-2]
        if Lk == 0:
            return T.Tensor(np.zeros(query.shape, dtype=query.dtype))
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        dh = self.d // self.heads
        scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        mask = None
        if key_mask is not None:
            km = np.asarray(key_mask, dtype=bool)
            mask = km[..., None, None, :]
        if causal:
            Lq = query.shape[-2]
            cm = np.tril(np.ones((Lq, Lk), dtype=bool))
            mask = cm if mask is None else (mask & cm)
        w = T.softmax(scores, axis=-1, mask=mask)
        self.last_weights = w.data
        out = self._merge(T.matmul(self.drop(w), v))
        out = self.o_proj(out)
        if key_mask is not None:
            has = np.asarray(key_mask, dtype=bool).any(axis=-1)
            if not has.all():
                out = out * has[..., None, None].astype(out.dtype)
        return out


class GRU(Module):
    """Single-layer GRU over the second-to-last axis of ``[..., T, D_in]``."""

    def __init__(self, n_in: int, hidden: int):
        self.hidden = hidden
        self.w_x = Parameter((n_in, 3 * hidden), ("normal", n_in**-0.5))
        self.b_x = Parameter((3 * hidden,), "zeros")
        self.w_h = Parameter((hidden, 3 * hidden), ("normal", hidden**-0.5))
        self.b_h = Parameter((3 * hidden,), "zeros")

    def forward(self, x: Tensor, h0: Tensor | None = None, mask=None) -> tuple[Tensor, Tensor]:
        *lead, steps, _ = x.shape
        gx = T.linear(x, self.w_x, self.b_x)
        h = h0 if h0 is not None else Tensor(np.zeros((*lead, self.hidden), dtype=x.dtype))
        outs = []
        for t in range(steps):
            m = None if mask is None else np.asarray(mask)[..., t]
            h = T.gru_cell(gx[..., t, :], h, self.w_h, self.b_h, m)
            outs.append(h)
        return T.stack(outs, axis=-2), h


class Conv(Module):
    """Channels-last 1D/2D convolution layer."""

    def __init__(self, rank: int, c_in: int, c_out: int, kernel: int, dilation=1, stride=1, padding="same"):
        ks = (kernel,) * rank
        fan_in = c_in * kernel**rank
        self.rank, self.dilation, self.stride, self.padding = rank, dilation, stride, padding
        self.weight = Parameter((*ks, c_in, c_out), ("normal", fan_in**-0.5))
        self.bias = Parameter((c_out,), "zeros")

    def forward(self, x: Tensor) -> Tensor:
        return T.dilated_conv(x, self.weight, self.dilation, self.rank, self.stride, self.padding, self.bias)


class GraphAttention(Module):
    """Single-head additive graph attention over a dense adjacency mask.

    ``e_ij = LeakyReLU(a_dst . W h_i + a_src . W h_j)`` normalized over the
    neighbours ``j`` of ``i``; the layer returns ``h + relu(sum_j a_ij W h_j)``.
    """

    def __init__(self, d: int, slope: float = 0.2):
        self.proj = Linear(d, d, bias=False)
        self.a_src = Parameter((d, 1), ("normal", d**-0.5))
        self.a_dst = Parameter((d, 1), ("normal", d**-0.5))
        self.slope = slope

    def attention(self, h: Tensor, adj) -> tuple[Tensor, Tensor]:
        wh = self.proj(h)
        src = T.matmul(wh, self.a_src)  # [..., N, 1]
        dst = T.matmul(wh, self.a_dst)
        e = T.leaky_relu(dst + src.swapaxes(-1, -2), self.slope)
        return T.softmax(e, axis=-1, mask=adj), wh

    def forward(self, h: Tensor, adj) -> Tensor:
        if h.shape[-2] == 0:
            return h
        alpha, wh = self.attention(h, adj)
        return h + T.relu(T.matmul(alpha, wh))


def sinusoid_table(length: int, dim: int, base: float = 10000.0, dtype=np.float64) -> np.ndarray:
    """``pe[p, 2i] = sin(p / base^(2i/dim))``, ``pe[p, 2i+1] = cos(...)``."""
    if dim % 2:
        raise ConfigurationError(f"positional encoding needs an even dim, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe.astype(dtype)


class TransformerBlock(Module):
    """Pre-norm transformer block (attention + GELU MLP)."""

    def __init__(self, d: int, heads: int, hidden: int, dropout: float = 0.0):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, dropout)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, hidden, d, act="gelu", dropout=dropout)

    def forward(self, x: Tensor, causal: bool = False, key_mask=None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h, key_mask=key_mask, causal=causal)
        return x + self.mlp(self.ln2(x))
