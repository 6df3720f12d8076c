import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wmmoe.decision import (
    CrossModalFusion,
    GateTrace,
    MoEBlock,
    NoiseInjector,
    Router,
    SelectiveSSM,
    SSMRefiner,
    TemporalConvRefiner,
    TrajectoryDecoder,
    topk_renormalize,
)
from wmmoe.ndgrad import ConfigurationError, Tensor
from wmmoe.ndgrad.nn import rng_scope


def test_noise_is_identity_in_eval(gen):
    n = NoiseInjector(4).initialize(0).eval()
    xs = [Tensor(gen.normal(size=s)) for s in ((1, 2, 3, 4), (1, 5, 4), (1, 16, 4))]
    assert all(a is b for a, b in zip(n(*xs), xs))


def test_noise_needs_rng_in_training(gen):
    n = NoiseInjector(4).initialize(0).train()
    x = Tensor(gen.normal(size=(1, 3, 4)))
    with pytest.raises(ConfigurationError):
        n(x, x, x)
    with rng_scope(np.random.default_rng(0)):
        out = n(x, x, x)
    assert 0 < np.abs(out[0].data - x.data).max() < 0.5


def test_fusion_gate_starts_neutral(gen):
    f = CrossModalFusion(4, 2, dropout=0.0).initialize(0)
    q = gen.normal(size=(1, 3, 2, 4))
    v = gen.normal(size=(1, 6, 4))
    a = f(Tensor(gen.normal(size=(1, 5, 4))), Tensor(v), Tensor(q)).data
    b = f(Tensor(gen.normal(size=(1, 5, 4))), Tensor(v), Tensor(q)).data
    np.testing.assert_array_equal(a, b)  # zero gate: language features drop out
    ref = q.reshape(1, 6, 4) + f.attn(Tensor(q.reshape(1, 6, 4)), Tensor(v), Tensor(v)).data
    np.testing.assert_allclose(a, ref.reshape(1, 3, 2, 4), atol=1e-14)


def test_tcn_receptive_field(gen):
    tcn = TemporalConvRefiner(4).initialize(0)
    assert TemporalConvRefiner.receptive_field() == 15
    F, K = 20, 1
    x = gen.normal(size=(1, F, K, 4))
    y = x.copy()
    y[0, 10] += 1.0
    d = np.abs(tcn.branch_1d(Tensor(x)).data - tcn.branch_1d(Tensor(y)).data).max(axis=(0, 2, 3))
    changed = np.flatnonzero(d > 0)
    assert changed.min() >= 10 - 7 and changed.max() <= 10 + 7
    assert len(changed) > 7


def test_tcn_residual_structure(gen):
    tcn = TemporalConvRefiner(4).initialize(0)
    x = Tensor(gen.normal(size=(2, 6, 3, 4)))
    b1, b2 = tcn.branch_1d(x).data, tcn.branch_2d(x).data
    ref = np.where(b1 > 0, b1, 0.01 * b1) + b2 + x.data
    np.testing.assert_allclose(tcn(x).data, ref, atol=1e-14)


def test_ssm_scan_is_causal_in_horizon(gen):
    ssm = SelectiveSSM(4, 1, d_state=3).initialize(0)
    u = gen.normal(size=(1, 6, 2, 4))
    w = u.copy()
    w[:, 4:] += 1.0
    np.testing.assert_allclose(ssm.scan(Tensor(u)).data[:, :4], ssm.scan(Tensor(w)).data[:, :4], atol=1e-14)


def test_ssm_refiner_shape_and_norm(gen):
    r = SSMRefiner(4, 2).initialize(0)
    out = r(Tensor(gen.normal(size=(2, 5, 3, 4)))).data
    assert out.shape == (2, 5, 3, 4)
    # sum of two normalized branches: zero mean over features
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(0.01, 1.0)), st.integers(1, 6))
def test_topk_renormalize_simplex(p, k):
    p = p / p.sum(-1, keepdims=True)
    q = topk_renormalize(p, k)
    np.testing.assert_allclose(q.sum(-1), 1.0, atol=1e-12)
    assert np.all((q > 0).sum(-1) == k)
    # kept weights keep their ratios
    kept = q > 0
    np.testing.assert_allclose(q[kept] / np.repeat(q.max(-1), kept.sum(-1)),
                               p[kept] / np.repeat(np.where(kept, p, 0).max(-1), kept.sum(-1)))


def test_topk_bounds():
    with pytest.raises(ConfigurationError):
        topk_renormalize(np.ones((1, 3)) / 3, 0)
    with pytest.raises(ConfigurationError):
        topk_renormalize(np.ones((1, 3)) / 3, 4)


def test_router_gates_on_simplex(gen):
    r = Router(4, 3).initialize(0)
    p = r(Tensor(gen.normal(size=(7, 4)))).data
    np.testing.assert_allclose(p.sum(-1), 1, atol=1e-12)
    q = r(Tensor(gen.normal(size=(7, 4))), top_k=2).data
    assert np.all((q > 0).sum(-1) == 2)


def test_single_expert_block_matches_plain_transformer(gen):
    x = Tensor(gen.normal(size=(2, 6, 8)))
    routed = MoEBlock(8, 2, 1, 16, 0.0, routed=True).initialize(3)
    plain = MoEBlock(8, 2, 1, 16, 0.0, routed=False).initialize(3)
    np.testing.assert_array_equal(routed(x).data, plain(x).data)


def test_tied_experts_ignore_router(gen):
    blk = MoEBlock(8, 2, 4, 16, 0.0).initialize(1)
    for e in blk.experts[1:]:
        e.load_state_dict(blk.experts[0].state_dict())
    x = Tensor(gen.normal(size=(2, 6, 8)))
    a = blk(x).data
    blk.router.mlp.fc2.weight.data = blk.router.mlp.fc2.weight.data + gen.normal(size=(8, 4))
    np.testing.assert_allclose(blk(x).data, a, atol=1e-9)


def test_gate_trace_records(gen):
    g = np.abs(gen.normal(size=(4, 3, 2)))
    g /= g.sum(-1, keepdims=True)
    recs = GateTrace([g]).records(labels=["a", "b", "a", "b"])
    got = {(r.scenario, r.expert): r.mean_weight for r in recs}
    assert got[("a", 1)] == pytest.approx(g[[0, 2], :, 1].mean())
    assert all(r.token_count == 6 for r in recs)


def test_decoder_positions_are_cumulative(gen):
    dec = TrajectoryDecoder(4, coord_scale=2.0).initialize(0)
    h = Tensor(gen.normal(size=(2, 5, 3, 4)))
    ctx = Tensor(gen.normal(size=(2, 4)))
    fc = dec(h, ctx)
    assert fc.mu.shape == (2, 3, 5, 2) and fc.probs.shape == (2, 3)
    out, _ = dec.gru(Tensor(np.concatenate([h.data.swapaxes(1, 2), np.broadcast_to(ctx.data[:, None, None], (2, 3, 5, 4))], -1)))
    steps = dec.loc(out).data * 2.0
    np.testing.assert_allclose(fc.mu.data, np.cumsum(steps, axis=2), atol=1e-13)
    assert np.all(fc.scale.data > 0)
    np.testing.assert_allclose(fc.probs.data.sum(-1), 1, atol=1e-12)
