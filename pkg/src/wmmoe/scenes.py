"""Traffic scene data model, JSON Lines corpus I/O, target-centric
normalization and BEV rasterization.

Track states are stored per frame as ``[x, y, vx, vy, ax, ay, yaw]`` for
frames ``-t_h-1 .. 0``; the last row is the current frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

STATE_FIELDS = ("x", "y", "vx", "vy", "ax", "ay", "yaw")
AGENT_CLASSES = ("vehicle", "pedestrian", "cyclist")
SCENARIO_LABELS = ("Turning", "UTurn", "Congested", "Braking", "Acceleration", "Common")

DEFAULT_HISTORY = 5
DEFAULT_FUTURE = 12
DEFAULT_BEV = (3, 64, 64)
DEFAULT_M_PER_PX = 1.0

# footprint (length, width) in metres
FOOTPRINT = {"vehicle": (4.5, 2.0), "pedestrian": (0.8, 0.8), "cyclist": (1.8, 0.8)}


class CorpusError(ValueError):
    """Schema or invariant violation in a corpus file."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line, self.field = line, field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class FrameError(RuntimeError):
    """The target has no observation at the current frame."""


def wrap_angle(a):
    """Map angles into (-pi, pi]; values already in range are returned unchanged."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + math.pi, 2.0 * math.pi) - math.pi
    out = np.where(out == -math.pi, math.pi, out)
    return np.where((a > math.pi) | (a <= -math.pi), out, a)


@dataclass(eq=False)
class AgentTrack:
    id: str
    cls: str
    states: np.ndarray  # [F, 7]
    mask: np.ndarray  # [F] bool

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, len(STATE_FIELDS))
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)

    def __eq__(self, other):
        return (
            isinstance(other, AgentTrack)
            and self.id == other.id
            and self.cls == other.cls
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.mask, other.mask)
        )

    @property
    def n_frames(self) -> int:
        return len(self.mask)

    def position(self, frame: int = -1) -> np.ndarray:
        return self.states[frame, :2]


@dataclass(eq=False)
class LanePolyline:
    id: str
    points: np.ndarray  # [P, 2]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)

    def __eq__(self, other):
        return isinstance(other, LanePolyline) and self.id == other.id and np.array_equal(self.points, other.points)


@dataclass(eq=False)
class BevRaster:
    data: np.ndarray  # [C, H, W] in [0, 1]
    m_per_px: float
    origin: tuple[float, float]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        return (
            isinstance(other, BevRaster)
            and self.m_per_px == other.m_per_px
            and tuple(self.origin) == tuple(other.origin)
            and np.array_equal(self.data, other.data)
        )


@dataclass(eq=False)
class Scene:
    scene_id: str
    target: AgentTrack
    neighbors: list[AgentTrack]
    lanes: list[LanePolyline]
    future: np.ndarray  # [t_f, 2]
    bev: BevRaster | None = None
    label: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.future = np.asarray(self.future, dtype=float).reshape(-1, 2)

    def __eq__(self, other):
        return (
            isinstance(other, Scene)
            and self.scene_id == other.scene_id
            and self.target == other.target
            and self.neighbors == other.neighbors
            and self.lanes == other.lanes
            and np.array_equal(self.future, other.future)
            and self.bev == other.bev
            and self.label == other.label
        )

    @property
    def t_f(self) -> int:
        return len(self.future)

    def tracks(self) -> list[AgentTrack]:
        return [self.target, *self.neighbors]


# ---------------------------------------------------------------------------
# validation and (de)serialization


def validate_track(track: AgentTrack, n_frames: int, where: str = "target", line: int | None = None) -> None:
    if track.cls not in AGENT_CLASSES:
        raise CorpusError(f"unknown agent class {track.cls!r}", line, f"{where}.class")
    if track.states.shape != (n_frames, len(STATE_FIELDS)):
        raise CorpusError(
            f"expected {n_frames} frames of {len(STATE_FIELDS)} values, got {track.states.shape}", line, f"{where}.states"
        )
    if track.mask.shape != (n_frames,):
        raise CorpusError(f"expected {n_frames} mask entries, got {track.mask.shape[0]}", line, f"{where}.mask")
    if not np.isfinite(track.states).all():
        raise CorpusError("non-finite state value", line, f"{where}.states")
    if np.any(track.states[~track.mask] != 0.0):
        raise CorpusError("masked-out frames must hold zeros", line, f"{where}.states")


def validate_scene(scene: Scene, history: int = DEFAULT_HISTORY, t_f: int = DEFAULT_FUTURE, line: int | None = None) -> None:
    validate_track(scene.target, history, "target", line)
    for i, nb in enumerate(scene.neighbors):
        validate_track(nb, history, f"neighbors[{i}]", line)
    for i, lane in enumerate(scene.lanes):
        pts = lane.points
        if len(pts) < 2:
            raise CorpusError("lane needs at least 2 points", line, f"lanes[{i}].points")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise CorpusError("consecutive lane points must be distinct", line, f"lanes[{i}].points")
        if not np.isfinite(pts).all():
            raise CorpusError("non-finite lane point", line, f"lanes[{i}].points")
    if scene.future.shape != (t_f, 2):
        raise CorpusError(f"future must have {t_f} points, got {len(scene.future)}", line, "future")
    if not np.isfinite(scene.future).all():
        raise CorpusError("non-finite future point", line, "future")
    if scene.label is not None and scene.label not in SCENARIO_LABELS:
        raise CorpusError(f"unknown label {scene.label!r}", line, "label")
    if scene.bev is not None:
        d = scene.bev.data
        if d.ndim != 3 or d.min(initial=0.0) < 0.0 or d.max(initial=0.0) > 1.0:
            raise CorpusError("bev must be C x H x W with values in [0, 1]", line, "bev")


def _track_from_json(obj, where: str, line: int) -> AgentTrack:
    if not isinstance(obj, dict):
        raise CorpusError("track must be an object", line, where)
    for key in ("id", "class", "states", "mask"):
        if key not in obj:
            raise CorpusError("missing field", line, f"{where}.{key}")
    try:
        states = np.asarray(obj["states"], dtype=float)
        mask = np.asarray(obj["mask"], dtype=float)
    except (TypeError, ValueError) as e:
        raise CorpusError(f"not numeric: {e}", line, f"{where}.states") from None
    if states.ndim != 2 or states.shape[1] != len(STATE_FIELDS):
        raise CorpusError(f"states must be rows of {len(STATE_FIELDS)} values", line, f"{where}.states")
    if mask.ndim != 1 or not np.isin(mask, (0, 1)).all():
        raise CorpusError("mask must be a list of 0/1", line, f"{where}.mask")
    return AgentTrack(str(obj["id"]), str(obj["class"]), states, mask.astype(bool))


def scene_from_json(obj: dict, line: int | None = None, history: int = DEFAULT_HISTORY, t_f: int = DEFAULT_FUTURE) -> Scene:
    if not isinstance(obj, dict):
        raise CorpusError("scene must be a JSON object", line)
    for key in ("scene_id", "target", "neighbors", "lanes", "future"):
        if key not in obj:
            raise CorpusError("missing field", line, key)
    target = _track_from_json(obj["target"], "target", line)
    if not isinstance(obj["neighbors"], list):
        raise CorpusError("must be a list", line, "neighbors")
    neighbors = [_track_from_json(nb, f"neighbors[{i}]", line) for i, nb in enumerate(obj["neighbors"])]
    if not isinstance(obj["lanes"], list):
        raise CorpusError("must be a list", line, "lanes")
    lanes = []
    for i, ln in enumerate(obj["lanes"]):
        if not isinstance(ln, dict) or "points" not in ln:
            raise CorpusError("lane needs 'points'", line, f"lanes[{i}]")
        pts = np.asarray(ln["points"], dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise CorpusError("points must be [x, y] pairs", line, f"lanes[{i}].points")
        lanes.append(LanePolyline(str(ln.get("id", i)), pts))
    try:
        future = np.asarray(obj["future"], dtype=float)
    except (TypeError, ValueError):
        raise CorpusError("not numeric", line, "future") from None
    if future.ndim != 2 or future.shape[1] != 2:
        raise CorpusError(f"future must be a list of {t_f} [x, y] points", line, "future")
    bev = None
    if obj.get("bev") is not None:
        b = obj["bev"]
        try:
            data = np.asarray(b["data"], dtype=float).reshape(b["shape"])
            bev = BevRaster(data, float(b["m_per_px"]), tuple(float(v) for v in b["origin"]))
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusError(f"malformed bev: {e}", line, "bev") from None
    frame = obj.get("frame", "world")
    if frame not in ("world", "target"):
        raise CorpusError(f"unknown frame {frame!r}", line, "frame")
    scene = Scene(str(obj["scene_id"]), target, neighbors, lanes, future, bev, obj.get("label"), {"frame": frame})
    validate_scene(scene, history, t_f, line)
    return scene


def _fmt(a: np.ndarray) -> list:
    return np.asarray(a, dtype=float).tolist()


def _track_to_json(t: AgentTrack) -> dict:
    return {"id": t.id, "class": t.cls, "states": _fmt(t.states), "mask": t.mask.astype(int).tolist()}


def scene_to_json(scene: Scene, include_bev: bool = False) -> dict:
    obj = {
        "scene_id": scene.scene_id,
        "target": _track_to_json(scene.target),
        "neighbors": [_track_to_json(n) for n in scene.neighbors],
        "lanes": [{"id": ln.id, "points": _fmt(ln.points)} for ln in scene.lanes],
        "future": _fmt(scene.future),
        "label": scene.label,
    }
    if scene.meta.get("frame") == "target":
        obj["frame"] = "target"
    if include_bev and scene.bev is not None:
        b = scene.bev
        obj["bev"] = {
            "shape": list(b.data.shape),
            "m_per_px": b.m_per_px,
            "origin": list(b.origin),
            "data": b.data.reshape(-1).tolist(),
        }
    return obj


def parse_corpus(
    path,
    history: int = DEFAULT_HISTORY,
    t_f: int = DEFAULT_FUTURE,
    rasterize: bool = True,
    bev_shape: tuple[int, int, int] = DEFAULT_BEV,
    m_per_px: float = DEFAULT_M_PER_PX,
) -> list[Scene]:
    """Read a JSON Lines corpus; every error names its line and field.

    Scenes without a ``bev`` entry are rasterized around the target when
    ``rasterize`` is set.
    """
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise CorpusError(f"malformed JSON: {e.msg}", lineno) from None
            scene = scene_from_json(obj, lineno, history, t_f)
            if scene.bev is None and rasterize:
                c, h, w = bev_shape
                scene.bev = rasterize_bev(scene, c, h, w, m_per_px)
            scenes.append(scene)
    return scenes


def write_corpus(scenes: Iterable[Scene], path, include_bev: bool = False) -> int:
    n = 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_json(s, include_bev), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# target-centric frame


def _rot(c: float, s: float, v: np.ndarray) -> np.ndarray:
    # rotate row vectors by -yaw0 given c=cos(yaw0), s=sin(yaw0)
    x, y = v[..., 0], v[..., 1]
    return np.stack([c * x + s * y, -s * x + c * y], axis=-1)


def _transform_track(t: AgentTrack, p0: np.ndarray, c: float, s: float, yaw0: float) -> AgentTrack:
    st = t.states.copy()
    m = t.mask
    st[m, 0:2] = _rot(c, s, st[m, 0:2] - p0)
    st[m, 2:4] = _rot(c, s, st[m, 2:4])
    st[m, 4:6] = _rot(c, s, st[m, 4:6])
    st[m, 6] = wrap_angle(st[m, 6] - yaw0)
    st[~m] = 0.0
    return AgentTrack(t.id, t.cls, st, m.copy())


def to_target_frame(scene: Scene) -> Scene:
    """Translate and rotate so the target sits at the origin facing +x at t=0.

    Scenes already marked as target-frame are returned unchanged.
    """
    if scene.meta.get("frame") == "target":
        return scene
    if not scene.target.mask[-1]:
        raise FrameError(f"scene {scene.scene_id}: target is not observed at t=0")
    p0 = scene.target.states[-1, 0:2].copy()
    yaw0 = float(scene.target.states[-1, 6])
    c, s = math.cos(yaw0), math.sin(yaw0)
    target = _transform_track(scene.target, p0, c, s, yaw0)
    neighbors = [_transform_track(n, p0, c, s, yaw0) for n in scene.neighbors]
    lanes = [LanePolyline(ln.id, _rot(c, s, ln.points - p0)) for ln in scene.lanes]
    future = _rot(c, s, scene.future - p0)
    out = replace(scene, target=target, neighbors=neighbors, lanes=lanes, future=future, bev=None, meta={**scene.meta, "frame": "target"})
    if scene.bev is not None:
        c_, h, w = scene.bev.data.shape
        out.bev = rasterize_bev(out, c_, h, w, scene.bev.m_per_px)
    return out


# ---------------------------------------------------------------------------
# BEV raster


def bresenham(r0: int, c0: int, r1: int, c1: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer line pixels from (r0, c0) to (r1, c1), endpoints included."""
    rows, cols = [], []
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    steep = dr > dc
    if steep:
        r0, c0, r1, c1, dr, dc, sr, sc = c0, r0, c1, r1, dc, dr, sc, sr
    err = 2 * dr - dc
    r, c = r0, c0
    for _ in range(dc + 1):
        if steep:
            rows.append(c)
            cols.append(r)
        else:
            rows.append(r)
            cols.append(c)
        while err >= 0 and dc:
            r += sr
            err -= 2 * dc
        c += sc
        err += 2 * dr
    return np.asarray(rows, dtype=int), np.asarray(cols, dtype=int)


def world_to_pixel(xy: np.ndarray, origin, m_per_px: float, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    col = np.floor((xy[:, 0] - origin[0]) / m_per_px + w / 2.0).astype(int)
    row = np.floor(h / 2.0 - (xy[:, 1] - origin[1]) / m_per_px).astype(int)
    return row, col


def _draw_footprint(img: np.ndarray, track: AgentTrack, origin, m_per_px: float) -> None:
    if not track.mask[-1]:
        return
    h, w = img.shape
    x, y, yaw = track.states[-1, 0], track.states[-1, 1], track.states[-1, 6]
    length, width = FOOTPRINT.get(track.cls, FOOTPRINT["vehicle"])
    r, c = world_to_pixel(np.array([[x, y]]), origin, m_per_px, h, w)
    if 0 <= r[0] < h and 0 <= c[0] < w:
        img[r[0], c[0]] = 1.0
    half = 0.5 * max(length, width) / m_per_px + 1
    r_lo, r_hi = max(int(r[0] - half), 0), min(int(r[0] + half) + 1, h)
    c_lo, c_hi = max(int(c[0] - half), 0), min(int(c[0] + half) + 1, w)
    if r_lo >= r_hi or c_lo >= c_hi:
        return
    rr, cc = np.mgrid[r_lo:r_hi, c_lo:c_hi]
    px = origin[0] + (cc + 0.5 - w / 2.0) * m_per_px
    py = origin[1] + (h / 2.0 - rr - 0.5) * m_per_px
    dx, dy = px - x, py - y
    lon = dx * math.cos(yaw) + dy * math.sin(yaw)
    lat = -dx * math.sin(yaw) + dy * math.cos(yaw)
    inside = (np.abs(lon) <= length / 2) & (np.abs(lat) <= width / 2)
    img[rr[inside], cc[inside]] = 1.0


def rasterize_bev(
    scene: Scene, C: int = 3, H: int = 64, W: int = 64, m_per_px: float = DEFAULT_M_PER_PX, origin=None
) -> BevRaster:
    """Three-channel raster: lanes (1-px lines), neighbour footprints, target footprint.

    Centred on the target's current position unless ``origin`` is given.
    """
    if H < 8 or W < 8:
        raise ValueError(f"raster must be at least 8x8, got {H}x{W}")
    if C < 3:
        raise ValueError("raster needs 3 channels")
    if origin is None:
        origin = tuple(float(v) for v in scene.target.states[-1, :2]) if scene.target.mask[-1] else (0.0, 0.0)
    img = np.zeros((C, H, W))
    for lane in scene.lanes:
        rows, cols = world_to_pixel(lane.points, origin, m_per_px, H, W)
        for i in range(len(rows) - 1):
            rr, cc = bresenham(rows[i], cols[i], rows[i + 1], cols[i + 1])
            ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            img[0, rr[ok], cc[ok]] = 1.0
    for nb in scene.neighbors:
        _draw_footprint(img[1], nb, origin, m_per_px)
    _draw_footprint(img[2], scene.target, origin, m_per_px)
    return BevRaster(img, float(m_per_px), tuple(origin))


def class_counts(scenes: Sequence[Scene]) -> dict[str, int]:
    counts = {lbl: 0 for lbl in SCENARIO_LABELS}
    for s in scenes:
        if s.label is not None:
            counts[s.label] += 1
    return counts
