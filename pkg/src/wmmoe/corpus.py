"""Corner-case curation, frame-drop perturbation, imbalance splits and a
synthetic scene generator with known labels."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ndgrad.rng import rng_stream
from .scenes import (
    DEFAULT_FUTURE,
    DEFAULT_HISTORY,
    SCENARIO_LABELS,
    AgentTrack,
    LanePolyline,
    Scene,
    to_target_frame,
    wrap_angle,
)


class ScenarioClass(str, enum.Enum):
    TURNING = "Turning"
    UTURN = "UTurn"
    CONGESTED = "Congested"
    BRAKING = "Braking"
    ACCELERATION = "Acceleration"
    COMMON = "Common"


CORNER_CLASSES = tuple(c.value for c in ScenarioClass if c is not ScenarioClass.COMMON)


@dataclass(frozen=True)
class CurationConfig:
    ttc_risk_s: float = 2.0
    yaw_turn_rad: float = 0.3
    yaw_uturn_rad: float = 0.7
    congested_vehicles: int = 35
    congested_pedestrians: int = 50
    brake_accel_mps2: float = -1.5
    accel_mps2: float = 2.5

    def __post_init__(self):
        if not (self.yaw_uturn_rad > self.yaw_turn_rad > 0):
            raise ValueError("need yaw_uturn_rad > yaw_turn_rad > 0")
        if self.ttc_risk_s <= 0:
            raise ValueError("ttc_risk_s must be positive")
        if self.brake_accel_mps2 >= 0 or self.accel_mps2 <= 0:
            raise ValueError("brake threshold must be negative and accel threshold positive")


class SplitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# time to collision


def compute_ttc(scene: Scene, pair: tuple[int, int] = (0, 1), eps: float = 1e-9) -> float:
    """Gap along the line joining two agents over their closing speed, at t=0.

    Agent index 0 is the target, ``i >= 1`` the ``i``-th neighbour. Returns
    ``inf`` when the agents are not approaching each other.
    """
    tracks = scene.tracks()
    a, b = tracks[pair[0]], tracks[pair[1]]
    if not (a.mask[-1] and b.mask[-1]):
        raise ValueError(f"agents {pair} must both be observed at t=0")
    d = b.states[-1, 0:2] - a.states[-1, 0:2]
    dist = float(np.hypot(d[0], d[1]))
    if dist == 0.0:
        return 0.0
    rel_v = b.states[-1, 2:4] - a.states[-1, 2:4]
    closing = -float(rel_v @ d) / dist
    if closing <= eps:
        return math.inf
    return dist / closing


def min_ttc(scene: Scene) -> float:
    best = math.inf
    if not scene.target.mask[-1]:
        return best
    for j, nb in enumerate(scene.neighbors, start=1):
        if nb.mask[-1]:
            best = min(best, compute_ttc(scene, (0, j)))
    return best


def is_high_risk(scene: Scene, config: CurationConfig = CurationConfig()) -> bool:
    return min_ttc(scene) < config.ttc_risk_s


# ---------------------------------------------------------------------------
# classification


def kinematic_summary(track: AgentTrack) -> dict[str, float]:
    """Net yaw change, mean longitudinal acceleration, mean speed and yaw rate
    over the observed frames."""
    st = track.states[track.mask]
    if len(st) == 0:
        return {"net_yaw": 0.0, "mean_accel": 0.0, "mean_speed": 0.0, "yaw_rate": 0.0}
    yaw = st[:, 6]
    net_yaw = float(wrap_angle(yaw[-1] - yaw[0]))
    a_lon = st[:, 4] * np.cos(yaw) + st[:, 5] * np.sin(yaw)
    speed = np.hypot(st[:, 2], st[:, 3])
    idx = np.flatnonzero(track.mask)
    span = idx[-1] - idx[0]
    return {
        "net_yaw": net_yaw,
        "mean_accel": float(a_lon.mean()),
        "mean_speed": float(speed.mean()),
        "yaw_rate_per_frame": abs(net_yaw) / span if span else 0.0,
    }


def agent_counts(scene: Scene) -> dict[str, int]:
    counts = {"vehicle": 0, "pedestrian": 0, "cyclist": 0}
    for nb in scene.neighbors:
        if nb.mask[-1]:
            counts[nb.cls] += 1
    return counts


def classify_scenario(scene: Scene, config: CurationConfig = CurationConfig()) -> ScenarioClass:
    """Assign one class with precedence UTurn > Turning > Congested > Braking
    > Acceleration > Common."""
    k = kinematic_summary(scene.target)
    turn = abs(k["net_yaw"])
    if turn > config.yaw_uturn_rad:
        return ScenarioClass.UTURN
    if turn > config.yaw_turn_rad:
        return ScenarioClass.TURNING
    counts = agent_counts(scene)
    if counts["vehicle"] > config.congested_vehicles or counts["pedestrian"] > config.congested_pedestrians:
        return ScenarioClass.CONGESTED
    if k["mean_accel"] <= config.brake_accel_mps2:
        return ScenarioClass.BRAKING
    if k["mean_accel"] >= config.accel_mps2:
        return ScenarioClass.ACCELERATION
    return ScenarioClass.COMMON


def curate(scenes: Iterable[Scene], config: CurationConfig = CurationConfig(), dt: float = 0.5):
    """Label every scene and collect per-class statistics.

    Returns the relabelled scenes and report rows with columns
    ``class,count,high_risk,avg_speed_kmh,avg_accel,avg_yaw_rate``.
    """
    out, stats = [], {c: [] for c in SCENARIO_LABELS}
    for s in scenes:
        cls = classify_scenario(s, config).value
        k = kinematic_summary(s.target)
        risk = is_high_risk(s, config)
        stats[cls].append((risk, k["mean_speed"] * 3.6, k["mean_accel"], k["yaw_rate_per_frame"] / dt))
        out.append(replace(s, label=cls))
    rows = []
    for c in SCENARIO_LABELS:
        v = stats[c]
        arr = np.asarray([r[1:] for r in v]) if v else np.zeros((0, 3))
        rows.append(
            {
                "class": c,
                "count": len(v),
                "high_risk": int(sum(r[0] for r in v)),
                "avg_speed_kmh": float(arr[:, 0].mean()) if v else 0.0,
                "avg_accel": float(arr[:, 1].mean()) if v else 0.0,
                "avg_yaw_rate": float(arr[:, 2].mean()) if v else 0.0,
            }
        )
    return out, rows


# ---------------------------------------------------------------------------
# frame-drop perturbation


def drop_frames(scene: Scene, m: int, rng: np.random.Generator) -> Scene:
    """Zero ``m`` randomly chosen history frames per track and clear their mask.

    The scene is moved to the target frame first, so dropping the target's
    current frame cannot lose the reference pose. Draws are a permutation
    prefix: with the same seed the frames dropped for ``m`` are a subset of
    those dropped for ``m + 1``. The future is untouched.
    """
    n = scene.target.n_frames
    if not 0 <= m < n:
        raise ValueError(f"m must be in [0, {n - 1}], got {m}")
    scene = to_target_frame(scene)

    def drop(track: AgentTrack) -> AgentTrack:
        idx = rng.permutation(n)[:m]
        st, mk = track.states.copy(), track.mask.copy()
        st[idx] = 0.0
        mk[idx] = False
        return AgentTrack(track.id, track.cls, st, mk)

    target = drop(scene.target)
    neighbors = [drop(nb) for nb in scene.neighbors]
    return replace(scene, target=target, neighbors=neighbors, bev=None, meta={**scene.meta, "dropped": m})


def drop_frames_corpus(scenes: Sequence[Scene], m: int, seed: int) -> list[Scene]:
    return [drop_frames(s, m, rng_stream(seed, f"drop/{s.scene_id}")) for s in scenes]


# ---------------------------------------------------------------------------
# imbalance splits

NAMED_SPLITS: dict[str, dict[str, int]] = {
    "a": {"Common": 46345},
    "b": {"Turning": 1070, "Congested": 934, "Braking": 782, "Acceleration": 406, "Common": 46345},
    "c": {"Turning": 1070, "Congested": 934, "Braking": 782, "Acceleration": 406, "Common": 20000},
    "d": {"Turning": 1070, "Congested": 934, "Braking": 782, "Acceleration": 406, "Common": 5000},
    "e": {"Turning": 1070, "Congested": 934, "Braking": 782, "Acceleration": 406, "Common": 1000},
}


@dataclass(frozen=True)
class SplitSpec:
    counts: Mapping[str, int]

    def __post_init__(self):
        for k, v in self.counts.items():
            if k not in SCENARIO_LABELS:
                raise ValueError(f"unknown class {k!r}")
            if v < 0:
                raise ValueError(f"negative count for {k}")

    @classmethod
    def named(cls, name: str, scale: float = 1.0) -> "SplitSpec":
        """One of the named splits (a-e), optionally scaled down."""
        base = NAMED_SPLITS[name]
        return cls({k: int(round(v * scale)) for k, v in base.items()})


def make_imbalance_splits(corpus: Sequence[Scene], spec: SplitSpec, seed: int = 0) -> list[Scene]:
    """Seeded per-class subsample with exact counts; classes absent from the
    spec are dropped. Output keeps corpus order."""
    by_class: dict[str, list[int]] = {}
    for i, s in enumerate(corpus):
        by_class.setdefault(s.label, []).append(i)
    keep: list[int] = []
    for cls in sorted(spec.counts):
        want = spec.counts[cls]
        have = by_class.get(cls, [])
        if want > len(have):
            raise SplitError(f"class {cls!r}: need {want}, have {len(have)} (short by {want - len(have)})")
        order = rng_stream(seed, f"split/{cls}").permutation(len(have))
        keep.extend(have[j] for j in order[:want])
    return [corpus[i] for i in sorted(keep)]


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthConfig:
    history: int = DEFAULT_HISTORY
    t_f: int = DEFAULT_FUTURE
    dt: float = 0.5
    class_weights: Mapping[str, float] = field(default_factory=lambda: {c: 1.0 for c in SCENARIO_LABELS})
    margin_rad: float = 0.05
    position_noise: float = 0.05
    max_neighbors: int = 8
    world_extent: float = 500.0
    curation: CurationConfig = CurationConfig()


def _simulate(v0, accel, omega_fn, yaw0, n_steps, dt, vmax=30.0, substeps=10):
    """Integrate a unicycle; returns per-frame [x, y, vx, vy, ax, ay, yaw]
    and the dense path."""
    h = dt / substeps
    x = y = 0.0
    v, yaw, t = v0, yaw0, 0.0
    frames, path = [], [(0.0, 0.0)]

    def record(v, yaw, t):
        a_lon = accel if (0.0 < v < vmax or (v <= 0 and accel > 0) or (v >= vmax and accel < 0)) else 0.0
        w = omega_fn(t)
        ax = a_lon * math.cos(yaw) - v * w * math.sin(yaw)
        ay = a_lon * math.sin(yaw) + v * w * math.cos(yaw)
        frames.append([x, y, v * math.cos(yaw), v * math.sin(yaw), ax, ay, yaw])

    record(v, yaw, t)
    for _ in range(n_steps):
        for _ in range(substeps):
            w = omega_fn(t)
            v_new = min(max(v + accel * h, 0.0), vmax)
            vm = 0.5 * (v + v_new)
            yaw_mid = yaw + 0.5 * w * h
            x += vm * math.cos(yaw_mid) * h
            y += vm * math.sin(yaw_mid) * h
            yaw += w * h
            v = v_new
            t += h
            path.append((x, y))
        record(v, yaw, t)
    return np.asarray(frames), np.asarray(path)


def _resample(path: np.ndarray, spacing: float) -> np.ndarray:
    seg = np.hypot(*np.diff(path, axis=0).T)
    keep = np.concatenate([[True], seg > 1e-9])
    path = path[keep]
    s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(path, axis=0).T))])
    n = max(int(s[-1] // spacing), 1)
    q = np.linspace(0.0, s[-1], n + 1)
    return np.stack([np.interp(q, s, path[:, 0]), np.interp(q, s, path[:, 1])], axis=1)


def _route(path: np.ndarray, yaw_start: float, yaw_end: float, back: float = 30.0, ahead: float = 40.0) -> np.ndarray:
    start = path[0] - back * np.array([math.cos(yaw_start), math.sin(yaw_start)])
    end = path[-1] + ahead * np.array([math.cos(yaw_end), math.sin(yaw_end)])
    return np.vstack([start, path, end])


def _class_params(label: str, gen: np.random.Generator, cfg: SynthConfig) -> dict:
    hist_time = (cfg.history - 1) * cfg.dt
    m = cfg.margin_rad
    cur = cfg.curation
    straight_w = lambda: gen.uniform(-0.02, 0.02)  # noqa: E731
    if label in ("Turning", "UTurn"):
        if label == "Turning":
            lo, hi = cur.yaw_turn_rad + m, cur.yaw_uturn_rad - m
            v0, total = gen.uniform(3.0, 7.0), gen.uniform(1.2, 1.8)
        else:
            lo, hi = cur.yaw_uturn_rad + m, cur.yaw_uturn_rad + 0.45
            v0, total = gen.uniform(2.0, 5.0), math.pi
        turn_hist = gen.uniform(lo, hi) * gen.choice([-1.0, 1.0])
        rate = turn_hist / hist_time
        dur = max(total / abs(rate), hist_time)
        return {"v0": v0, "accel": gen.uniform(-0.3, 0.3), "omega": lambda t: rate if t < dur else 0.0}
    w = straight_w()
    if label == "Congested":
        return {"v0": gen.uniform(1.5, 4.0), "accel": gen.uniform(-0.3, 0.3), "omega": lambda t: w, "crowd": True}
    if label == "Braking":
        a = gen.uniform(cur.brake_accel_mps2 - 2.0, cur.brake_accel_mps2 - 0.3)
        v0 = gen.uniform(-a * hist_time + 2.0, -a * hist_time + 8.0)
        return {"v0": v0, "accel": a, "omega": lambda t: w}
    if label == "Acceleration":
        return {"v0": gen.uniform(3.0, 9.0), "accel": gen.uniform(cur.accel_mps2 + 0.3, cur.accel_mps2 + 2.0), "omega": lambda t: w}
    return {"v0": gen.uniform(5.0, 14.0), "accel": gen.uniform(-0.3, 0.3), "omega": lambda t: w}


def _neighbor(gen, cls, base_yaw, dt, n_frames, pos, speed) -> AgentTrack:
    yaw = base_yaw + gen.normal(0.0, 0.05)
    frames, _ = _simulate(speed, 0.0, lambda t: 0.0, yaw, n_frames - 1, dt, substeps=1)
    frames[:, 0:2] += pos
    # late arrivals miss early frames; every neighbour is seen at t=0
    mask = np.ones(n_frames, dtype=bool)
    if gen.random() < 0.2:
        mask[: gen.integers(1, n_frames)] = False
    frames[~mask] = 0.0
    return AgentTrack("", cls, frames, mask)


def _to_world(track_states: np.ndarray, mask: np.ndarray, theta: float, offset: np.ndarray) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s], [s, c]])
    st = track_states.copy()
    st[:, 0:2] = st[:, 0:2] @ R.T + offset
    st[:, 2:4] = st[:, 2:4] @ R.T
    st[:, 4:6] = st[:, 4:6] @ R.T
    st[:, 6] = wrap_angle(st[:, 6] + theta)
    st[~mask] = 0.0
    return st


def synth_scene(label: str, gen: np.random.Generator, cfg: SynthConfig, scene_id: str) -> Scene:
    """One kinematically consistent scene of the requested class."""
    p = _class_params(label, gen, cfg)
    H, F = cfg.history, cfg.t_f
    frames, path = _simulate(p["v0"], p["accel"], p["omega"], 0.0, H - 1 + F, cfg.dt)
    hist, fut = frames[:H], frames[H:, 0:2]
    noise = cfg.position_noise
    hist = hist.copy()
    hist[:, 0:2] += gen.normal(0.0, noise, size=(H, 2))
    fut = fut + gen.normal(0.0, noise, size=fut.shape)
    route = _resample(_route(path, frames[0, 6], frames[-1, 6]), 4.0)

    # neighbours around the current target position
    cur_pos, cur_yaw = frames[H - 1, 0:2], frames[H - 1, 6]
    fwd = np.array([math.cos(cur_yaw), math.sin(cur_yaw)])
    left = np.array([-fwd[1], fwd[0]])
    neighbors = []
    if p.get("crowd"):
        if gen.random() < 0.7:
            n_veh, n_ped = int(gen.integers(cfg.curation.congested_vehicles + 1, cfg.curation.congested_vehicles + 10)), int(gen.integers(0, 10))
        else:
            n_veh, n_ped = int(gen.integers(5, 15)), int(gen.integers(cfg.curation.congested_pedestrians + 1, cfg.curation.congested_pedestrians + 10))
        spread, speed_hi = 25.0, 3.0
    else:
        n_total = int(gen.integers(0, cfg.max_neighbors + 1))
        n_ped = int(gen.binomial(n_total, 0.2))
        n_veh = n_total - n_ped
        spread, speed_hi = 35.0, 14.0
    for j in range(n_veh + n_ped):
        cls = "vehicle" if j < n_veh else "pedestrian"
        if cls == "pedestrian" and not p.get("crowd") and gen.random() < 0.15:
            cls = "cyclist"
        lon = gen.uniform(-spread, spread)
        lat = gen.choice([-7.0, -3.5, 3.5, 7.0]) + gen.normal(0.0, 0.3) if cls == "vehicle" else gen.uniform(-12, 12)
        speed = gen.uniform(0.5, speed_hi) if cls == "vehicle" else gen.uniform(0.3, 1.8)
        heading = cur_yaw if cls == "vehicle" else cur_yaw + gen.uniform(-math.pi, math.pi)
        # back-project so the neighbour reaches the sampled spot at t=0
        start = cur_pos + lon * fwd + lat * left - speed * (H - 1) * cfg.dt * np.array([math.cos(heading), math.sin(heading)])
        nb = _neighbor(gen, cls, heading, cfg.dt, H, start, speed)
        nb.id = f"a{j + 1}"
        neighbors.append(nb)

    lanes = [LanePolyline("l0", route)]
    n_side = 2 if p.get("crowd") else 1
    for k in range(n_side):
        off = (3.5 * (k + 1)) * (1 if gen.random() < 0.5 else -1)
        lanes.append(LanePolyline(f"l{k + 1}", _offset_polyline(route, off)))

    theta = gen.uniform(-math.pi, math.pi)
    offset = gen.uniform(-cfg.world_extent, cfg.world_extent, size=2)
    tmask = np.ones(H, dtype=bool)
    target = AgentTrack("a0", "vehicle", _to_world(hist, tmask, theta, offset), tmask)
    nbs = [AgentTrack(nb.id, nb.cls, _to_world(nb.states, nb.mask, theta, offset), nb.mask) for nb in neighbors]
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s], [s, c]])
    lanes = [LanePolyline(ln.id, ln.points @ R.T + offset) for ln in lanes]
    future = fut @ R.T + offset
    return Scene(scene_id, target, nbs, lanes, future, None, label)


def _offset_polyline(points: np.ndarray, offset: float) -> np.ndarray:
    d = np.gradient(points, axis=0)
    n = np.stack([-d[:, 1], d[:, 0]], axis=1)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-9)
    out = points + offset * n
    keep = np.concatenate([[True], np.any(np.diff(out, axis=0) != 0.0, axis=1)])
    return out[keep]


def generate_synthetic(config: SynthConfig, n: int, rng: np.random.Generator | int, prefix: str = "syn") -> list[Scene]:
    """``n`` labelled scenes; classes drawn in proportion to ``class_weights``.

    Each scene carries its generating class as label; :func:`classify_scenario`
    recovers it because every threshold is cleared by the configured margin.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = rng if isinstance(rng, np.random.Generator) else rng_stream(int(rng), "synthetic")
    labels = list(config.class_weights)
    w = np.asarray([config.class_weights[k] for k in labels], dtype=float)
    w = w / w.sum()
    out = []
    for i in range(n):
        label = labels[int(gen.choice(len(labels), p=w))]
        out.append(synth_scene(label, gen, config, f"{prefix}-{i:06d}"))
    return out


def generate_by_counts(config: SynthConfig, counts: Mapping[str, int], seed: int, prefix: str = "syn") -> list[Scene]:
    """Exact per-class counts, interleaved deterministically."""
    gen = rng_stream(seed, f"synthetic/{prefix}")
    labels = [lbl for lbl in SCENARIO_LABELS for _ in range(counts.get(lbl, 0))]
    order = gen.permutation(len(labels))
    return [synth_scene(labels[j], gen, config, f"{prefix}-{i:06d}") for i, j in enumerate(order)]
