import numpy as np
import pytest

from wmmoe.ndgrad import ConfigurationError, ContractError, Tensor, rng_stream
from wmmoe.ndgrad import nn


def _sm(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _mha_oracle(m: nn.MultiHeadAttention, q, k, v, key_mask=None, causal=False):
    def proj(lin, x):
        return x @ lin.weight.data + lin.bias.data

    Q, K, V = proj(m.q_proj, q), proj(m.k_proj, k), proj(m.v_proj, v)
    B, Lq, D = Q.shape
    Lk = K.shape[1]
    dh = D // m.heads
    out = np.zeros((B, Lq, D))
    for b in range(B):
        for h in range(m.heads):
            sl = slice(h * dh, (h + 1) * dh)
            s = Q[b, :, sl] @ K[b, :, sl].T / np.sqrt(dh)
            allowed = np.ones((Lq, Lk), bool)
            if key_mask is not None:
                allowed &= key_mask[b][None, :]
            if causal:
                allowed &= np.tril(np.ones((Lq, Lk), bool))
            s = np.where(allowed, s, -np.inf)
            w = np.zeros_like(s)
            rows = allowed.any(1)
            w[rows] = _sm(s[rows])
            out[b, :, sl] = w @ V[b, :, sl]
    return out @ m.o_proj.weight.data + m.o_proj.bias.data


@pytest.mark.parametrize("causal", [False, True])
def test_attention_matches_per_head_loop(gen, causal):
    m = nn.MultiHeadAttention(8, 2).initialize(0)
    q, k = gen.normal(size=(2, 4, 8)), gen.normal(size=(2, 4, 8))
    mask = np.array([[True, True, False, True], [True, False, True, True]])
    out = m(Tensor(q), Tensor(k), Tensor(k), key_mask=mask, causal=causal).data
    np.testing.assert_allclose(out, _mha_oracle(m, q, k, k, mask, causal), atol=1e-12)


def test_attention_fully_masked_sample_is_zero(gen):
    m = nn.MultiHeadAttention(4, 2).initialize(1)
    x = Tensor(gen.normal(size=(2, 3, 4)))
    out = m(x, x, x, key_mask=np.array([[False] * 3, [True] * 3])).data
    assert np.all(out[0] == 0) and np.any(out[1] != 0)


def test_attention_rejects_bad_heads():
    with pytest.raises(ConfigurationError, match="divisible"):
        nn.MultiHeadAttention(6, 4)


def test_gru_layer_matches_cell_loop(gen):
    g = nn.GRU(3, 4).initialize(2)
    x = gen.normal(size=(2, 5, 3))
    seq, last = g(Tensor(x))
    H = 4
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    h = np.zeros((2, H))
    for t in range(5):
        gx = x[:, t] @ g.w_x.data + g.b_x.data
        gh = h @ g.w_h.data + g.b_h.data
        z, r = sig(gx[:, :H] + gh[:, :H]), sig(gx[:, H : 2 * H] + gh[:, H : 2 * H])
        h = z * np.tanh(gx[:, 2 * H :] + r * gh[:, 2 * H :]) + (1 - z) * h
        np.testing.assert_allclose(seq.data[:, t], h, atol=1e-12)
    np.testing.assert_allclose(last.data, h, atol=1e-12)


def test_graph_attention_oracle(gen):
    gat = nn.GraphAttention(4).initialize(3)
    h = gen.normal(size=(5, 4))
    adj = np.eye(5, dtype=bool) | np.eye(5, k=1, dtype=bool) | np.eye(5, k=-1, dtype=bool)
    wh = h @ gat.proj.weight.data
    ref = np.zeros_like(h)
    for i in range(5):
        nbrs = np.flatnonzero(adj[i])
        e = np.array([wh[i] @ gat.a_dst.data[:, 0] + wh[j] @ gat.a_src.data[:, 0] for j in nbrs])
        e = np.where(e > 0, e, 0.2 * e)
        a = _sm(e)
        ref[i] = h[i] + np.maximum(a @ wh[nbrs], 0)
    np.testing.assert_allclose(gat(Tensor(h), adj).data, ref, atol=1e-12)


def test_sinusoid_table_values():
    pe = nn.sinusoid_table(3, 4, base=100.0)
    np.testing.assert_allclose(pe[2], [np.sin(2), np.cos(2), np.sin(0.2), np.cos(0.2)], atol=1e-15)
    with pytest.raises(ConfigurationError):
        nn.sinusoid_table(3, 5)


def test_dropout_requires_rng_in_training():
    d = nn.Dropout(0.5)
    x = Tensor(np.ones((100,)))
    assert d.eval()(x) is x
    d.train()
    with pytest.raises(ContractError):
        d(x)
    with nn.rng_scope(np.random.default_rng(0)):
        y = d(x).data
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_initialize_is_path_keyed_and_repeatable():
    a = nn.MLP(3, 5, 2).initialize(11)
    b = nn.MLP(3, 5, 2).initialize(11)
    c = nn.MLP(3, 5, 2).initialize(12)
    for (n, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
        if "weight" in n:
            assert not np.array_equal(p.data, r.data)
    # same path, same stream
    ref = rng_stream(11, "fc1.weight").normal(size=(3, 5)) * 3**-0.5
    np.testing.assert_allclose(a.fc1.weight.data, ref)


def test_state_dict_roundtrip_and_mismatch():
    a, b = nn.MLP(2, 3, 1).initialize(0), nn.MLP(2, 3, 1).initialize(5)
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a.fc2.weight.data, b.fc2.weight.data)
    with pytest.raises(KeyError, match="missing"):
        b.load_state_dict({})
