import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.draw import line as sk_line

from wmmoe.scenes import (
    AgentTrack,
    CorpusError,
    FrameError,
    LanePolyline,
    Scene,
    bresenham,
    parse_corpus,
    rasterize_bev,
    scene_from_json,
    scene_to_json,
    to_target_frame,
    wrap_angle,
    write_corpus,
)


def _track(id_, xy, yaw, v=(0.0, 0.0), cls="vehicle", n=5, mask=None):
    st_ = np.zeros((n, 7))
    st_[:, 0:2] = xy
    st_[:, 2:4] = v
    st_[:, 6] = yaw
    m = np.ones(n, bool) if mask is None else np.asarray(mask, bool)
    st_[~m] = 0
    return AgentTrack(id_, cls, st_, m)


def _scene(**kw):
    base = dict(
        scene_id="s0",
        target=_track("t", (10.0, 5.0), math.pi / 2, (0.0, 3.0)),
        neighbors=[_track("n", (10.0, 15.0), math.pi, (-1.0, 0.0))],
        lanes=[LanePolyline("l", [[10.0, 0.0], [10.0, 30.0]])],
        future=np.tile([10.0, 8.0], (12, 1)),
        label="Common",
    )
    base.update(kw)
    return Scene(**base)


def test_json_roundtrip_is_exact(raw_scenes, tmp_path):
    p = tmp_path / "c.jsonl"
    write_corpus(raw_scenes, p)
    back = parse_corpus(p, rasterize=False)
    assert back == list(raw_scenes)


def test_roundtrip_preserves_target_frame_marker():
    s = to_target_frame(_scene())
    back = scene_from_json(json.loads(json.dumps(scene_to_json(s))))
    assert back.meta["frame"] == "target"
    assert to_target_frame(back) is back


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda o: o.pop("future"), "future"),
        (lambda o: o["target"].update({"class": "truck"}), "target.class"),
        (lambda o: o["neighbors"][0].update({"mask": [1, 1, 2, 1, 1]}), "neighbors[0].mask"),
        (lambda o: o["lanes"][0].update({"points": [[0, 0]]}), "lanes[0].points"),
        (lambda o: o.update({"future": o["future"][:3]}), "future"),
        (lambda o: o.update({"label": "Drifting"}), "label"),
        (lambda o: o.update({"frame": "ego"}), "frame"),
    ],
)
def test_schema_errors_name_line_and_field(tmp_path, mutate, field):
    good = scene_to_json(_scene())
    bad = json.loads(json.dumps(good))
    mutate(bad)
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(CorpusError) as ei:
        parse_corpus(p, rasterize=False)
    assert ei.value.line == 2 and ei.value.field == field


def test_masked_frames_must_be_zero():
    obj = scene_to_json(_scene())
    obj["target"]["mask"][0] = 0
    with pytest.raises(CorpusError, match="zeros"):
        scene_from_json(obj, line=1)


def test_malformed_json_line(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(CorpusError, match="line 1"):
        parse_corpus(p)


def test_target_frame_hand_case():
    out = to_target_frame(_scene())
    # target faces +y at (10,5): rotating by -90 deg maps +y to +x
    np.testing.assert_allclose(out.target.states[-1, :2], [0, 0], atol=1e-12)
    np.testing.assert_allclose(out.target.states[-1, 2:4], [3, 0], atol=1e-12)
    assert out.target.states[-1, 6] == pytest.approx(0.0)
    np.testing.assert_allclose(out.neighbors[0].states[-1, :2], [10, 0], atol=1e-12)
    np.testing.assert_allclose(out.neighbors[0].states[-1, 2:4], [0, 1], atol=1e-12)
    assert out.neighbors[0].states[-1, 6] == pytest.approx(math.pi / 2)
    np.testing.assert_allclose(out.future[0], [3, 0], atol=1e-12)
    np.testing.assert_allclose(out.lanes[0].points, [[-5, 0], [25, 0]], atol=1e-12)


def test_target_frame_preserves_distances(raw_scenes):
    for s in raw_scenes[:8]:
        out = to_target_frame(s)
        a = np.vstack([s.future] + [n.states[n.mask, :2] for n in s.neighbors])
        b = np.vstack([out.future] + [n.states[n.mask, :2] for n in out.neighbors])
        da = np.linalg.norm(a - s.target.states[-1, :2], axis=1)
        np.testing.assert_allclose(np.linalg.norm(b, axis=1), da, atol=1e-9)


def test_target_frame_needs_current_observation():
    s = _scene(target=_track("t", (1.0, 1.0), 0.0, mask=[1, 1, 1, 1, 0]))
    with pytest.raises(FrameError):
        to_target_frame(s)


def test_wrap_angle():
    np.testing.assert_allclose(wrap_angle([3 * math.pi / 2, -3 * math.pi / 2, math.pi, -math.pi, 0.3]),
                               [-math.pi / 2, math.pi / 2, math.pi, math.pi, 0.3])


@settings(max_examples=100, deadline=None)
@given(st.integers(-20, 20), st.integers(-20, 20), st.integers(-20, 20), st.integers(-20, 20))
def test_bresenham_matches_reference_line(r0, c0, r1, c1):
    rr, cc = bresenham(r0, c0, r1, c1)
    er, ec = sk_line(r0, c0, r1, c1)
    assert set(zip(rr.tolist(), cc.tolist())) == set(zip(er.tolist(), ec.tolist()))
    assert (rr[0], cc[0]) == (r0, c0) and (rr[-1], cc[-1]) == (r1, c1)


def test_raster_channels_and_footprint():
    s = to_target_frame(_scene())
    bev = rasterize_bev(s, 3, 32, 32, 1.0)
    assert bev.shape == (3, 32, 32) and set(np.unique(bev.data)) <= {0.0, 1.0}
    # vehicle 4.5 x 2 at 1 m/px, facing +x: 4 x 2 pixel centres fall inside
    assert bev.data[2].sum() == 8
    assert bev.data[2, 15:17, 14:18].all()
    # lane along y=0 sits on a pixel boundary, so either adjacent row may hold it
    assert bev.data[0, 15:17, 11:].max(axis=0).all()
    assert bev.data[0].sum() == 21
    # neighbour 10 m ahead
    assert bev.data[1, 15:17, 26].all()


def test_raster_rejects_tiny_grid():
    with pytest.raises(ValueError):
        rasterize_bev(_scene(), 3, 4, 4)
