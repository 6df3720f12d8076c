import numpy as np
import pytest

from wmmoe.ndgrad import ConfigurationError, Tensor
from wmmoe.perception import (
    LANE_FEATURES,
    N_FEATURES,
    BevEncoder,
    Perception,
    bev_output_size,
    collate,
    lane_nodes,
    track_features,
)
from wmmoe.scenes import LanePolyline


@pytest.fixture(scope="module")
def perception():
    return Perception(8, 2, dropout=0.0).initialize(4).eval()


def test_track_features_layout(scenes):
    tr = scenes[0].target
    f = track_features(tr)
    assert f.shape == (5, N_FEATURES)
    s = tr.states[-1]
    np.testing.assert_allclose(f[-1], [s[0] / 10, s[1] / 10, s[2] / 10, s[3] / 10, s[4] / 5, s[5] / 5,
                                       np.cos(s[6]), np.sin(s[6]), 1.0])


def test_unobserved_frames_are_zero(scenes):
    nb = next(n for s in scenes for n in s.neighbors if not n.mask.all())
    f = track_features(nb)
    assert np.all(f[~nb.mask] == 0) and np.all(f[nb.mask, -1] == 1)


def test_lane_graph_links_consecutive_points(scenes):
    s = scenes[0]
    s2 = type(s)(**{**s.__dict__, "lanes": [LanePolyline("a", [[0, 0], [1, 0], [2, 0]]), LanePolyline("b", [[0, 5], [1, 5]])]})
    feats, adj = lane_nodes(s2)
    assert feats.shape == (5, LANE_FEATURES)
    expected = np.array([
        [1, 1, 0, 0, 0],
        [1, 1, 1, 0, 0],
        [0, 1, 1, 0, 0],
        [0, 0, 0, 1, 1],
        [0, 0, 0, 1, 1],
    ], bool)
    np.testing.assert_array_equal(adj, expected)
    np.testing.assert_allclose(feats[2], [0.2, 0, 1, 0])


def test_lane_nodes_radius_and_cap(scenes):
    feats, adj = lane_nodes(scenes[0], radius=15.0, max_nodes=5)
    assert len(feats) <= 5 and np.all(np.hypot(feats[:, 0], feats[:, 1]) <= 1.5 + 1e-12)


def test_collate_padding(scenes):
    b = collate(scenes[:4])
    N = max(len(s.neighbors) for s in scenes[:4])
    assert b.neighbors.shape == (4, N, 5, N_FEATURES)
    for i, s in enumerate(scenes[:4]):
        assert b.neighbor_mask[i].sum() == len(s.neighbors)
        assert np.all(b.neighbors[i, len(s.neighbors):] == 0)
    assert b.bev.shape == (4, 64, 64, 3) and b.future.shape == (4, 12, 2)
    assert collate(scenes[:2], np.float32).target.dtype == np.float32


@pytest.mark.parametrize("size", [16, 32, 64, 100])
def test_bev_output_size_matches_encoder(size, gen):
    enc = BevEncoder(3, 8, widths=(4, 4, 4, 4), dropout=0.0).initialize(0)
    out = enc(Tensor(gen.random((1, size, size, 3))))
    assert out.shape == (1, bev_output_size(size) ** 2, 8)
    assert bev_output_size(64) == 4


def test_encoding_shapes(perception, scenes):
    b = collate(scenes[:3])
    enc = perception(b)
    B, N, L = 3, b.neighbors.shape[1], b.lanes.shape[1]
    assert enc.t_enc.shape == (B, 5, 8) and enc.s_enc.shape == (B, 5, 8)
    assert enc.n_enc.shape == (B, N, 8) and enc.l_enc.shape == (B, L, 8)
    assert enc.v_enc.shape == (B, 16, 8)
    np.testing.assert_array_equal(enc.s_enc_tbd, np.swapaxes(enc.s_enc.data, 0, 1))


def test_neighbor_permutation_invariance(perception, scenes, gen):
    b = collate(scenes[:4])
    perm = gen.permutation(b.neighbors.shape[1])
    b2 = collate(scenes[:4])
    b2.neighbors, b2.neighbor_frames, b2.neighbor_mask = b.neighbors[:, perm], b.neighbor_frames[:, perm], b.neighbor_mask[:, perm]
    e1, e2 = perception(b), perception(b2)
    np.testing.assert_allclose(e1.s_enc.data, e2.s_enc.data, atol=1e-12)
    np.testing.assert_allclose(e1.n_enc.data[:, perm], e2.n_enc.data, atol=1e-12)


def test_padding_neighbours_are_inert(perception, scenes):
    a = collate(scenes[:1])
    padded = collate(scenes[:2])  # pads scene 0 up to the larger neighbour count
    if padded.neighbors.shape[1] == a.neighbors.shape[1]:
        pytest.skip("no padding in this pair")
    e1 = perception(a)
    e2 = perception(padded)
    np.testing.assert_allclose(e1.s_enc.data[0], e2.s_enc.data[0], atol=1e-12)


def test_empty_modalities_leave_target_stream(perception, scenes):
    b = collate(scenes[:2])
    t_enc = perception.encode_target(Tensor(b.target), b.target_mask)
    no_n = Tensor(np.zeros((2, 0, 8)))
    no_l = Tensor(np.zeros((2, 0, 8)))
    s = perception.fuse_scene(t_enc, no_n, no_l, b.target_mask, np.zeros((2, 0), bool), np.zeros((2, 0), bool))
    pe = perception.time_pe[:5]
    ref = perception.target_ln(Tensor(t_enc.data + pe) + perception.target_sa(*(Tensor(t_enc.data + pe),) * 3,
                                                                                  key_mask=b.target_mask))
    np.testing.assert_allclose(s.data, ref.data, atol=1e-14)


def test_missing_bev_is_reported(perception, scenes):
    b = collate(scenes[:1])
    b.bev = None
    with pytest.raises(ConfigurationError, match="BEV"):
        perception(b)
