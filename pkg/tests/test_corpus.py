import math

import numpy as np
import pytest

from wmmoe.corpus import (
    NAMED_SPLITS,
    CurationConfig,
    ScenarioClass,
    SplitError,
    SplitSpec,
    SynthConfig,
    classify_scenario,
    compute_ttc,
    curate,
    drop_frames,
    drop_frames_corpus,
    generate_by_counts,
    is_high_risk,
    kinematic_summary,
    make_imbalance_splits,
    min_ttc,
    synth_scene,
)
from wmmoe.ndgrad import rng_stream
from wmmoe.scenes import SCENARIO_LABELS, AgentTrack, Scene, class_counts, to_target_frame


def _track(xy, v, yaw=0.0, a=(0.0, 0.0), cls="vehicle", n=5, id_="x"):
    st = np.zeros((n, 7))
    st[:, 0:2], st[:, 2:4], st[:, 4:6], st[:, 6] = xy, v, a, yaw
    return AgentTrack(id_, cls, st, np.ones(n, bool))


def _scene(target, neighbors=()):
    return Scene("s", target, list(neighbors), [], np.zeros((12, 2)))


# -- time to collision ---------------------------------------------------------


def test_ttc_head_on_oracle():
    s = _scene(_track((0, 0), (10, 0)), [_track((20, 0), (0, 0))])
    assert compute_ttc(s) == 2.0


def test_ttc_mutual_approach_and_separation():
    s = _scene(_track((0, 0), (5, 0)), [_track((30, 0), (-5, 0)), _track((0, -10), (0, -3))])
    assert compute_ttc(s, (0, 1)) == 3.0
    assert compute_ttc(s, (0, 2)) == math.inf
    assert min_ttc(s) == 3.0


def test_ttc_oblique_uses_closing_component():
    # neighbour at (3,4), target moves +x at 5 m/s: closing speed 3, gap 5
    s = _scene(_track((0, 0), (5, 0)), [_track((3, 4), (0, 0))])
    assert compute_ttc(s) == pytest.approx(5 / 3, abs=1e-15)


def test_high_risk_is_strict_below_threshold():
    at = _scene(_track((0, 0), (10, 0)), [_track((20, 0), (0, 0))])
    below = _scene(_track((0, 0), (10, 0)), [_track((19.9, 0), (0, 0))])
    assert not is_high_risk(at) and is_high_risk(below)


def test_ttc_requires_observation():
    nb = _track((20, 0), (0, 0))
    nb.mask[-1] = False
    nb.states[-1] = 0
    with pytest.raises(ValueError):
        compute_ttc(_scene(_track((0, 0), (10, 0)), [nb]))


# -- classification ------------------------------------------------------------


def _turning(yaws):
    t = _track((0, 0), (5, 0))
    t.states[:, 6] = yaws
    return _scene(t)


@pytest.mark.parametrize(
    "yaws,expected",
    [
        ([0, 0.1, 0.2, 0.3, 0.4], "Turning"),
        ([0, 0.2, 0.4, 0.6, 0.8], "UTurn"),
        ([3.0, 3.1, -3.1, -3.0, -2.9], "Turning"),  # wraps through pi: net 0.38
        ([0, 0.05, 0.1, 0.15, 0.2], "Common"),
    ],
)
def test_turn_thresholds(yaws, expected):
    assert classify_scenario(_turning(yaws)).value == expected


def test_precedence_turn_beats_congestion():
    crowd = [_track((i, 5), (1, 0), id_=f"n{i}") for i in range(40)]
    t = _track((0, 0), (5, 0), a=(-3, 0))
    t.states[:, 6] = [0, 0.1, 0.2, 0.3, 0.4]
    assert classify_scenario(_scene(t, crowd)) is ScenarioClass.TURNING
    t.states[:, 6] = 0
    assert classify_scenario(_scene(t, crowd)) is ScenarioClass.CONGESTED
    assert classify_scenario(_scene(t, crowd[:35])) is ScenarioClass.BRAKING


def test_accel_thresholds_use_longitudinal_component():
    # heading +y, acceleration along +y
    t = _track((0, 0), (0, 5), yaw=math.pi / 2, a=(0, 2.5))
    assert classify_scenario(_scene(t)) is ScenarioClass.ACCELERATION
    t = _track((0, 0), (0, 5), yaw=math.pi / 2, a=(2.5, 0))  # purely lateral
    assert classify_scenario(_scene(t)) is ScenarioClass.COMMON
    t = _track((0, 0), (5, 0), a=(-1.5, 0))
    assert classify_scenario(_scene(t)) is ScenarioClass.BRAKING


def test_config_validation():
    with pytest.raises(ValueError):
        CurationConfig(yaw_turn_rad=0.8, yaw_uturn_rad=0.7)
    with pytest.raises(ValueError):
        CurationConfig(brake_accel_mps2=0.5)


def test_curate_report_rows():
    s1 = _scene(_track((0, 0), (10, 0)), [_track((20, 0), (0, 0))])
    s2 = _scene(_track((0, 0), (5, 0), a=(3, 0)))
    out, rows = curate([s1, s2])
    assert [s.label for s in out] == ["Common", "Acceleration"]
    by = {r["class"]: r for r in rows}
    assert set(by) == set(SCENARIO_LABELS)
    assert by["Common"]["count"] == 1 and by["Common"]["high_risk"] == 0
    assert by["Common"]["avg_speed_kmh"] == pytest.approx(36.0)
    assert by["Acceleration"]["avg_accel"] == pytest.approx(3.0)


def test_kinematic_summary_yaw_rate():
    t = _track((0, 0), (5, 0))
    t.states[:, 6] = [0, 0.1, 0.2, 0.3, 0.4]
    k = kinematic_summary(t)
    assert k["net_yaw"] == pytest.approx(0.4) and k["yaw_rate_per_frame"] == pytest.approx(0.1)


# -- generator -----------------------------------------------------------------


@pytest.mark.parametrize("label", SCENARIO_LABELS)
def test_generator_roundtrip_per_class(label):
    gen = rng_stream(5, label)
    for i in range(40):
        s = synth_scene(label, gen, SynthConfig(), f"{label}{i}")
        assert classify_scenario(s).value == label


def test_generate_by_counts_exact_and_deterministic():
    counts = {"Common": 5, "Braking": 3}
    a = generate_by_counts(SynthConfig(), counts, 3)
    b = generate_by_counts(SynthConfig(), counts, 3)
    assert a == b
    assert class_counts(a)["Common"] == 5 and class_counts(a)["Braking"] == 3


# -- frame drops ---------------------------------------------------------------


@pytest.mark.parametrize("m", [0, 1, 2, 3])
def test_drop_frames_count_and_zeros(raw_scenes, m):
    for s in raw_scenes[:6]:
        out = drop_frames(s, m, np.random.default_rng(0))
        for orig, tr in zip(s.tracks(), out.tracks()):
            assert (~tr.mask).sum() - (~orig.mask).sum() <= m
            assert np.all(tr.states[~tr.mask] == 0)
        # the target starts fully observed, so exactly m of 5 frames go
        assert (~out.target.mask).sum() == m
        np.testing.assert_array_equal(out.future, to_target_frame(s).future)


def test_drop_sets_are_nested(raw_scenes):
    s = raw_scenes[0]
    prev = None
    for m in range(4):
        dropped = ~drop_frames(s, m, np.random.default_rng(9)).target.mask
        if prev is not None:
            assert np.all(dropped[prev])
        prev = dropped


def test_drop_frames_corpus_is_seeded(raw_scenes):
    a = drop_frames_corpus(raw_scenes[:4], 2, 1)
    b = drop_frames_corpus(raw_scenes[:4], 2, 1)
    assert a == b


def test_drop_range_checked(raw_scenes):
    with pytest.raises(ValueError):
        drop_frames(raw_scenes[0], 5, np.random.default_rng(0))


# -- splits ----------------------------------------------------------------


def test_imbalance_split_exact_counts():
    corpus = generate_by_counts(SynthConfig(), {"Common": 10, "Turning": 4, "Braking": 3}, 0)
    out = make_imbalance_splits(corpus, SplitSpec({"Common": 6, "Turning": 2}), seed=1)
    c = class_counts(out)
    assert c["Common"] == 6 and c["Turning"] == 2 and c["Braking"] == 0
    pos = [corpus.index(s) for s in out]
    assert pos == sorted(pos)
    assert out == make_imbalance_splits(corpus, SplitSpec({"Common": 6, "Turning": 2}), seed=1)


def test_imbalance_split_shortfall_is_named():
    corpus = generate_by_counts(SynthConfig(), {"Common": 2}, 0)
    with pytest.raises(SplitError, match="'Common'.*short by 3"):
        make_imbalance_splits(corpus, SplitSpec({"Common": 5}))


def test_named_splits():
    assert NAMED_SPLITS["a"] == {"Common": 46345}
    spec = SplitSpec.named("e", scale=0.1)
    assert spec.counts == {"Turning": 107, "Congested": 93, "Braking": 78, "Acceleration": 41, "Common": 100}
