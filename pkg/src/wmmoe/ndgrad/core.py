"""Dense arrays with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When a :class:`Tape` is active and any
input requires a gradient, the result is appended to the tape together with a
closure mapping the output gradient to the input gradients. Because nodes are
appended in creation order the tape is already topologically sorted, so
:func:`backward` is a single reverse sweep.
"""

from __future__ import annotations

import hashlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()
_config = {"dtype": np.float64, "check_finite": True}


class DimensionError(ValueError):
    """Shapes are incompatible for the requested op."""


class ConfigurationError(ValueError):
    """An op or layer was configured with inconsistent sizes or options."""


class ContractError(RuntimeError):
    """A documented precondition was violated."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def set_default_dtype(dtype) -> None:
    _config["dtype"] = np.dtype(dtype).type


def get_default_dtype():
    return _config["dtype"]


def set_finite_checks(enabled: bool) -> None:
    _config["check_finite"] = bool(enabled)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Records differentiable ops for one forward pass.

    A tape is single-writer: enter it with ``with Tape() as tape:`` around the
    forward computation, then call ``tape.backward(loss)``.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor") -> "Gradients":
        return backward(loss, self)


class no_grad:
    """Suspend recording inside a tape context."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


class Gradients:
    """Gradient map keyed by tensor identity; unreachable tensors map to zeros."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._refs: dict[int, Tensor] = {}

    def _accumulate(self, t: "Tensor", g: np.ndarray) -> None:
        k = id(t)
        if k in self._grads:
            self._grads[k] = self._grads[k] + g
        else:
            self._grads[k] = g
            self._refs[k] = t

    def __contains__(self, t: "Tensor") -> bool:
        return id(t) in self._grads

    def __getitem__(self, t: "Tensor") -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def get(self, t: "Tensor", default=None):
        return self._grads.get(id(t), default)

    def items(self):
        for k, g in self._grads.items():
            yield self._refs[k], g

    def __len__(self) -> int:
        return len(self._grads)


def backward(loss: "Tensor", tape: Tape) -> Gradients:
    """Reverse sweep over ``tape`` from a scalar ``loss``.

    Returns gradients for every ``requires_grad`` leaf that the loss depends
    on; leaves it does not depend on read back as zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    out = Gradients()
    if not loss.requires_grad:
        return out
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._parents:
                k = id(parent)
                if k in pending:
                    pending[k] = pending[k] + pg
                else:
                    pending[k] = pg
            else:
                out._accumulate(parent, pg)
    return out


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _config["dtype"]
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- basic properties
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    if _config["check_finite"] and data.size and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {getattr(fn, '__qualname__', fn)}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out.name = None
    tape = active_tape()
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = tuple(parents)
                out._backward = fn
                tape.nodes.append(out)
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data

    def bw(g):
        return (g * p * ad ** (p - 1),)

    return _make(ad**p, (a,), bw)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    c = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(np.where(c, g, 0.0), sa), _unbroadcast(np.where(c, 0.0, g), sb)

    return _make(np.where(c, a.data, b.data).astype(a.dtype, copy=False), (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise unary


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (g * 0.5 / y,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.logaddexp(0.0, xd).astype(xd.dtype, copy=False), (x,), lambda g: (g * _sigmoid(xd),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    xd = x.data
    pos = xd > 0
    return _make(np.where(pos, xd, slope * xd), (x,), lambda g: (np.where(pos, g, slope * g),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def bw(g):
        return (g * s * (1.0 + xd * (1.0 - s)),)

    return _make(xd * s, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    xd = x.data
    c = float(np.sqrt(2.0 / np.pi))
    x2 = xd * xd
    u = c * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(u)

    def bw(g):
        du = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _make(0.5 * xd * (1.0 + t), (x,), bw)


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def clip(x: Tensor, lo=None, hi=None) -> Tensor:
    xd = x.data
    y = np.clip(xd, lo, hi)
    inside = y == xd
    return _make(y, (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return tsum(x, axes, keepdims) * (1.0 / max(n, 1))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) or isinstance(i, np.integer) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.asarray(x.data[idx]), (x,), bw)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    axis = axis % (ts[0].ndim + 1)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in ts], axis=axis), tuple(ts), bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, old),))


def expand_dims(x: Tensor, axis: int) -> Tensor:
    shape = list(x.shape)
    axis = axis % (x.ndim + 1)
    shape.insert(axis, 1)
    return reshape(x, tuple(shape))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; both operands need at least two axes."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``x`` of shape ``[..., in]`` and ``w`` of shape ``[in, out]``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} x {w.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd
    if b is not None:
        y = y + b.data
    n_in, n_out = wd.shape

    def bw(g):
        g2 = g.reshape(-1, n_out)
        gx = (g @ wd.T) if x.requires_grad else None
        gw = (xd.reshape(-1, n_in).T @ g2) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, bw)


# ---------------------------------------------------------------------------
# normalization / probability


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax with max subtraction.

    ``mask`` (boolean, broadcastable) marks valid entries; invalid entries get
    exactly zero weight and a row with no valid entry is all zeros.
    """
    if x.shape[axis] < 1:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    xd = x.data
    if mask is None:
        z = xd - xd.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        mx = np.where(m, xd, -np.inf).max(axis=axis, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.where(m, np.exp(np.where(m, xd - mx, 0.0)), 0.0)
        s = e.sum(axis=axis, keepdims=True)
        y = e / np.where(s > 0, s, 1.0)
    y = y.astype(xd.dtype, copy=False)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    d = xd.shape[-1]

    def bw(g):
        gh = g * gain.data if gain is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        out = [gx]
        if gain is not None:
            out.append((g * xhat).reshape(-1, d).sum(axis=0).reshape(gain.shape))
        if bias is not None:
            out.append(g.reshape(-1, d).sum(axis=0).reshape(bias.shape))
        return tuple(out)

    parents = [x] + [p for p in (gain, bias) if p is not None]
    return _make(y.astype(xd.dtype, copy=False), tuple(parents), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# gated recurrence


def gru_cell(gx: Tensor, h: Tensor, wh: Tensor, bh: Tensor, mask=None) -> Tensor:
    """One GRU update from precomputed input gates.

    ``gx`` holds ``x @ W_x + b_x`` laid out as ``[update | reset | candidate]``.
    The new state is ``z * cand + (1 - z) * h``. Rows where ``mask`` is 0 keep
    ``h`` unchanged.
    """
    H = h.shape[-1]
    if gx.shape[-1] != 3 * H or wh.shape != (H, 3 * H):
        raise DimensionError(f"gru_cell shapes: gx {gx.shape}, h {h.shape}, wh {wh.shape}")
    gxd, hd, whd = gx.data, h.data, wh.data
    gh = hd @ whd + bh.data
    z = _sigmoid(gxd[..., :H] + gh[..., :H])
    r = _sigmoid(gxd[..., H : 2 * H] + gh[..., H : 2 * H])
    ghn = gh[..., 2 * H :]
    n = np.tanh(gxd[..., 2 * H :] + r * ghn)
    hn = z * n + (1.0 - z) * hd
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=hd.dtype)[..., None]
        hn = m * hn + (1.0 - m) * hd

    def bw(g):
        gm = g * m if m is not None else g
        dz = gm * (n - hd) * z * (1.0 - z)
        dn = gm * z * (1.0 - n * n)
        dr = dn * ghn * r * (1.0 - r)
        dgx = np.concatenate([dz, dr, dn], axis=-1)
        dgh = np.concatenate([dz, dr, dn * r], axis=-1)
        dh = gm * (1.0 - z) + dgh @ whd.T
        if m is not None:
            dh = dh + g * (1.0 - m)
        dwh = hd.reshape(-1, H).T @ dgh.reshape(-1, 3 * H) if wh.requires_grad else None
        dbh = dgh.reshape(-1, 3 * H).sum(axis=0) if bh.requires_grad else None
        return dgx, dh, dwh, dbh

    return _make(hn, (gx, h, wh, bh), bw)


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(size: int, k: int, dilation: int, stride: int, padding) -> tuple[int, int, int]:
    span = dilation * (k - 1)
    if padding == "same":
        pl, pr = dilation * ((k - 1) - (k - 1) // 2), dilation * ((k - 1) // 2)
    else:
        pl = pr = int(padding)
    out = (size + pl + pr - span - 1) // stride + 1
    if size + pl + pr < span + 1 or out < 1:
        raise DimensionError(
            f"kernel of size {k} (dilation {dilation}) is larger than padded input of size {size + pl + pr}"
        )
    return pl, pr, out


def dilated_conv(
    x: Tensor,
    kernel: Tensor,
    dilation=1,
    rank: int = 1,
    stride=1,
    padding="same",
    bias: Tensor | None = None,
) -> Tensor:
    """Channels-last cross-correlation with dilated taps.

    rank 1: ``x`` is ``[..., L, C_in]`` and ``kernel`` is ``[k, C_in, C_out]``.
    rank 2: ``x`` is ``[..., H, W, C_in]`` and ``kernel`` is ``[kh, kw, C_in, C_out]``.
    ``padding="same"`` zero-pads so that stride-1 output keeps the input size;
    for even kernels the extra padding goes in front.
    """
    if rank not in (1, 2):
        raise ConfigurationError(f"rank must be 1 or 2, got {rank}")
    if kernel.ndim != rank + 2:
        raise DimensionError(f"rank-{rank} kernel needs {rank + 2} axes, got {kernel.shape}")
    dil = (dilation,) * rank if np.isscalar(dilation) else tuple(dilation)
    st = (stride,) * rank if np.isscalar(stride) else tuple(stride)
    if min(dil) < 1 or min(st) < 1:
        raise ConfigurationError("dilation and stride must be >= 1")
    if padding == "same" and max(st) != 1:
        raise ConfigurationError("'same' padding requires stride 1")
    cin, cout = kernel.shape[-2], kernel.shape[-1]
    if x.shape[-1] != cin:
        raise DimensionError(f"input channels {x.shape[-1]} != kernel channels {cin}")
    spatial = x.shape[-1 - rank : -1]
    ks = kernel.shape[:rank]
    geo = [_conv_geometry(s, k, d, t, padding) for s, k, d, t in zip(spatial, ks, dil, st)]
    lead = x.shape[: -1 - rank]
    pad = [(0, 0)] * len(lead) + [(g[0], g[1]) for g in geo] + [(0, 0)]
    xp = np.pad(x.data, pad)
    outs = [g[2] for g in geo]

    def tap_slices(offsets):
        sl = [slice(None)] * len(lead)
        for o, d, t, n in zip(offsets, dil, st, outs):
            start = o * d
            sl.append(slice(start, start + (n - 1) * t + 1, t))
        sl.append(slice(None))
        return tuple(sl)

    taps = list(np.ndindex(*ks))
    cols = np.stack([xp[tap_slices(tp)] for tp in taps], axis=-2)  # [..., *outs, ntaps, cin]
    flat_w = kernel.data.reshape(len(taps) * cin, cout)
    cols2 = cols.reshape(*cols.shape[:-2], len(taps) * cin)
    y = cols2 @ flat_w
    if bias is not None:
        y = y + bias.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        gk = None
        if kernel.requires_grad:
            gk = (cols2.reshape(-1, len(taps) * cin).T @ g2).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = (g @ flat_w.T).reshape(cols.shape)
            gxp = np.zeros_like(xp)
            for i, tp in enumerate(taps):
                gxp[tap_slices(tp)] += gcols[..., i, :]
            crop = [slice(None)] * len(lead) + [slice(p[0], p[0] + s) for p, s in zip(geo, spatial)] + [slice(None)]
            gx = gxp[tuple(crop)]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(y, parents, bw)


# ---------------------------------------------------------------------------
# selective state-space scan


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor) -> Tensor:
    """Diagonal selective scan with zero-order-hold discretization.

    Shapes: ``u`` and ``delta`` ``[S, L, D]``; ``A`` ``[D, N]`` (negative);
    ``B`` and ``C`` ``[S, L, N]``. For each step::

        h_t = exp(delta_t * A) * h_{t-1} + (exp(delta_t * A) - 1) / A * B_t * u_t
        y_t = sum_n C_t[n] * h_t[:, n]

    Cost is linear in ``L``.
    """
    S, L, D = u.shape
    N = A.shape[-1]
    if delta.shape != (S, L, D) or A.shape != (D, N) or B.shape != (S, L, N) or C.shape != (S, L, N):
        raise DimensionError(
            f"selective_scan shapes: u {u.shape}, delta {delta.shape}, A {A.shape}, B {B.shape}, C {C.shape}"
        )
    ud, dd, Ad, Bd, Cd = u.data, delta.data, A.data, B.data, C.data
    dA = dd[..., None] * Ad  # [S, L, D, N]
    Abar = np.exp(dA)
    coef = (Abar - 1.0) / Ad
    hs = np.empty((S, L, D, N), dtype=ud.dtype)
    h = np.zeros((S, D, N), dtype=ud.dtype)
    for t in range(L):
        h = Abar[:, t] * h + coef[:, t] * (Bd[:, t, None, :] * ud[:, t, :, None])
        hs[:, t] = h
    y = np.einsum("sldn,sln->sld", hs, Cd)

    def bw(g):
        gC = np.einsum("sld,sldn->sln", g, hs)
        gAbar = np.empty_like(hs)
        gcoef = np.empty_like(hs)
        gu = np.empty_like(ud)
        gB = np.empty_like(Bd)
        gh = np.zeros((S, D, N), dtype=ud.dtype)
        for t in range(L - 1, -1, -1):
            gh = gh + g[:, t, :, None] * Cd[:, t, None, :]
            hprev = hs[:, t - 1] if t > 0 else np.zeros_like(gh)
            gAbar[:, t] = gh * hprev
            bu = Bd[:, t, None, :] * ud[:, t, :, None]
            gcoef[:, t] = gh * bu
            gc = gh * coef[:, t]
            gu[:, t] = (gc * Bd[:, t, None, :]).sum(axis=-1)
            gB[:, t] = (gc * ud[:, t, :, None]).sum(axis=1)
            gh = gh * Abar[:, t]
        gdelta = (gAbar * Ad * Abar + gcoef * Abar).sum(axis=-1)
        dcoef_dA = (dd[..., None] * Abar * Ad - (Abar - 1.0)) / (Ad * Ad)
        gA = (gAbar * dd[..., None] * Abar + gcoef * dcoef_dA).sum(axis=(0, 1))
        return gu, gdelta, gA, gB, gC

    return _make(y, (u, delta, A, B, C), bw)


def parameters_checksum(arrays: Iterable[np.ndarray]) -> str:
    """SHA-256 over the raw bytes of ``arrays`` in order."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
