"""Minimal dense arrays with reverse-mode differentiation."""

from .gradcheck import check_gradients, relative_error
from .rng import RngStream, rng_stream, stream_id
from .core import (
    ConfigurationError,
    ContractError,
    DimensionError,
    Gradients,
    NonFiniteError,
    Tape,
    Tensor,
    absolute,
    add,
    backward,
    broadcast_to,
    clip,
    concat,
    dilated_conv,
    div,
    dropout,
    exp,
    expand_dims,
    gelu,
    get_default_dtype,
    getitem,
    gru_cell,
    layer_norm,
    leaky_relu,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    parameters_checksum,
    power,
    relu,
    reshape,
    selective_scan,
    set_default_dtype,
    set_finite_checks,
    sigmoid,
    silu,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    tanh,
    tensor,
    transpose,
    tsum,
    where,
)

__all__ = [n for n in dir() if not n.startswith("_")]
