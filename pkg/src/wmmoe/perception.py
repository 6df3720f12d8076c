"""Scene encoders: target and neighbour histories, lane graph, BEV raster,
and the fusion into a per-frame scene state."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ndgrad import core as T
from .ndgrad.core import ConfigurationError, DimensionError, Tensor
from .ndgrad.nn import GRU, MLP, Conv, Dropout, GraphAttention, LayerNorm, Linear, Module, MultiHeadAttention, sinusoid_table
from .scenes import AgentTrack, Scene

N_FEATURES = 9
LANE_FEATURES = 4


def track_features(track: AgentTrack) -> np.ndarray:
    """Per-frame ``[x, y, vx, vy, ax, ay, cos yaw, sin yaw, observed]``, scaled
    to order one; unobserved frames are all zero."""
    s = track.states
    m = track.mask.astype(float)
    f = np.stack(
        [s[:, 0] / 10, s[:, 1] / 10, s[:, 2] / 10, s[:, 3] / 10, s[:, 4] / 5, s[:, 5] / 5, np.cos(s[:, 6]), np.sin(s[:, 6]), np.ones(len(m))],
        axis=1,
    )
    return f * m[:, None]


def lane_nodes(scene: Scene, radius: float = 40.0, max_nodes: int = 96):
    """Lane points within ``radius`` of the origin as graph nodes.

    Returns features ``[L, 4]`` (position/10 and unit direction) and a
    boolean adjacency ``[L, L]`` linking consecutive points of the same
    polyline, with self loops.
    """
    feats, lane_id, order = [], [], []
    for li, ln in enumerate(scene.lanes):
        p = ln.points
        d = np.diff(p, axis=0)
        d = np.vstack([d, d[-1:]])
        d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-9)
        keep = np.hypot(p[:, 0], p[:, 1]) <= radius
        for j in np.flatnonzero(keep):
            feats.append([p[j, 0] / 10, p[j, 1] / 10, d[j, 0], d[j, 1]])
            lane_id.append(li)
            order.append(j)
    if len(feats) > max_nodes:
        dist = np.hypot(np.asarray(feats)[:, 0], np.asarray(feats)[:, 1])
        sel = np.sort(np.argsort(dist, kind="stable")[:max_nodes])
        feats = [feats[i] for i in sel]
        lane_id = [lane_id[i] for i in sel]
        order = [order[i] for i in sel]
    n = len(feats)
    lid, ordv = np.asarray(lane_id), np.asarray(order)
    adj = (lid[:, None] == lid[None, :]) & (np.abs(ordv[:, None] - ordv[None, :]) <= 1) if n else np.zeros((0, 0), bool)
    return np.asarray(feats, dtype=float).reshape(n, LANE_FEATURES), adj


@dataclass
class SceneBatch:
    """Padded arrays for a list of target-frame scenes."""

    target: np.ndarray  # [B, T, F]
    target_mask: np.ndarray  # [B, T]
    neighbors: np.ndarray  # [B, N, T, F]
    neighbor_frames: np.ndarray  # [B, N, T]
    neighbor_mask: np.ndarray  # [B, N]
    lanes: np.ndarray  # [B, L, 4]
    lane_adj: np.ndarray  # [B, L, L]
    lane_mask: np.ndarray  # [B, L]
    bev: np.ndarray | None  # [B, H, W, C]
    future: np.ndarray | None  # [B, t_f, 2]
    labels: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.target.shape[0]

    def astype(self, dtype) -> "SceneBatch":
        cast = lambda a: None if a is None else a.astype(dtype)  # noqa: E731
        return SceneBatch(
            cast(self.target), self.target_mask, cast(self.neighbors), self.neighbor_frames, self.neighbor_mask,
            cast(self.lanes), self.lane_adj, self.lane_mask, cast(self.bev), cast(self.future), self.labels, self.ids,
        )


def collate(scenes: Sequence[Scene], dtype=np.float64, lane_radius: float = 40.0, max_lane_nodes: int = 96) -> SceneBatch:
    """Stack target-frame scenes into padded arrays.

    Scenes must already be in the target frame; BEV rasters are used if
    every scene carries one.
    """
    if not scenes:
        raise ValueError("cannot collate an empty batch")
    B = len(scenes)
    Th = scenes[0].target.n_frames
    N = max(len(s.neighbors) for s in scenes)
    lanes = [lane_nodes(s, lane_radius, max_lane_nodes) for s in scenes]
    L = max(f.shape[0] for f, _ in lanes)
    tgt = np.zeros((B, Th, N_FEATURES))
    nb = np.zeros((B, N, Th, N_FEATURES))
    nbf = np.zeros((B, N, Th), bool)
    ln = np.zeros((B, L, LANE_FEATURES))
    adj = np.zeros((B, L, L), bool)
    lmask = np.zeros((B, L), bool)
    for b, s in enumerate(scenes):
        if s.target.n_frames != Th:
            raise DimensionError(f"scene {s.scene_id}: {s.target.n_frames} history frames, batch has {Th}")
        tgt[b] = track_features(s.target)
        for j, a in enumerate(s.neighbors):
            nb[b, j] = track_features(a)
            nbf[b, j] = a.mask
        f, a = lanes[b]
        n = f.shape[0]
        ln[b, :n], adj[b, :n, :n], lmask[b, :n] = f, a, True
    bev = None
    if all(s.bev is not None for s in scenes):
        bev = np.stack([np.moveaxis(s.bev.data, 0, -1) for s in scenes]).astype(float)
    fut = None
    if all(s.future is not None and len(s.future) for s in scenes):
        fut = np.stack([s.future for s in scenes]).astype(float)
    out = SceneBatch(
        tgt, np.stack([s.target.mask for s in scenes]), nb, nbf, nbf.any(axis=-1), ln, adj, lmask, bev, fut,
        [s.label for s in scenes], [s.scene_id for s in scenes],
    )
    return out.astype(dtype)


@dataclass
class SceneEncoding:
    t_enc: Tensor  # [B, T, D]
    n_enc: Tensor  # [B, N, D]
    l_enc: Tensor  # [B, L, D]
    v_enc: Tensor  # [B, P, D] flattened BEV tokens
    s_enc: Tensor  # [B, T, D]
    neighbor_mask: np.ndarray
    lane_mask: np.ndarray

    @property
    def s_enc_tbd(self) -> np.ndarray:
        """Scene state in time-major ``[T, B, D]`` layout."""
        return np.swapaxes(self.s_enc.data, 0, 1)


def bev_output_size(size: int) -> int:
    """Spatial size after the BEV stack (k4 s2 p1 twice, k3 s2 p1 twice,
    k3 s1 p1 once)."""
    for k, s in ((4, 2), (4, 2), (3, 2), (3, 2), (3, 1)):
        size = (size + 2 - k) // s + 1
    return size


class BevEncoder(Module):
    """Five-layer CNN; the output map is flattened to ``H' * W'`` tokens."""

    def __init__(self, c_in: int, d: int, widths=(16, 32, 32, 64), dropout: float = 0.1):
        chans = (c_in, *widths, d)
        spec = ((4, 2), (4, 2), (3, 2), (3, 2), (3, 1))
        self.convs = [Conv(2, chans[i], chans[i + 1], k, 1, s, 1) for i, (k, s) in enumerate(spec)]
        self.drop = Dropout(dropout)

    def forward(self, bev: Tensor) -> Tensor:
        h = bev
        for i, c in enumerate(self.convs):
            h = c(h)
            if i < len(self.convs) - 1:
                h = T.relu(h)
        B, Hh, Ww, D = h.shape
        return self.drop(h.reshape(B, Hh * Ww, D))


class Perception(Module):
    """Encodes a :class:`SceneBatch` into a :class:`SceneEncoding`."""

    def __init__(self, d: int = 64, heads: int = 4, dropout: float = 0.1, bev_channels: int = 3, history: int = 5):
        if d % 2:
            raise ConfigurationError(f"embedding width must be even, got {d}")
        self.d = d
        self.target_mlp = MLP(N_FEATURES, d, d)
        self.target_gru = GRU(d, d)
        self.neighbor_mlp = MLP(N_FEATURES, d, d)
        self.neighbor_gru = GRU(d, d)
        self.lane_mlp = MLP(LANE_FEATURES, d, d)
        self.lane_gat = [GraphAttention(d), GraphAttention(d)]
        self.bev = BevEncoder(bev_channels, d, dropout=dropout)
        self.target_sa = MultiHeadAttention(d, heads, dropout)
        self.neighbor_sa = MultiHeadAttention(d, heads, dropout)
        self.lane_sa = MultiHeadAttention(d, heads, dropout)
        self.target_ln = LayerNorm(d)
        self.neighbor_ln = LayerNorm(d)
        self.lane_ln = LayerNorm(d)
        self.to_lanes = MultiHeadAttention(d, heads, dropout)
        self.to_neighbors = MultiHeadAttention(d, heads, dropout)
        self.time_pe = sinusoid_table(history, d)

    def encode_target(self, hist: Tensor, mask=None) -> Tensor:
        if hist.shape[-1] != N_FEATURES:
            raise DimensionError(f"target history needs {N_FEATURES} features, got {hist.shape}")
        out, _ = self.target_gru(self.target_mlp(hist), mask=mask)
        return out

    def encode_neighbors(self, hist: Tensor, frame_mask: np.ndarray, agent_mask: np.ndarray) -> Tensor:
        B, N = hist.shape[:2]
        if frame_mask.shape != hist.shape[:3] or agent_mask.shape != (B, N):
            raise DimensionError(f"neighbor masks {frame_mask.shape}/{agent_mask.shape} do not match {hist.shape}")
        if N == 0:
            return Tensor(np.zeros((B, 0, self.d), dtype=hist.dtype))
        _, h = self.neighbor_gru(self.neighbor_mlp(hist), mask=frame_mask)
        return h * agent_mask[..., None].astype(hist.dtype)

    def encode_lanes(self, nodes: Tensor, adj: np.ndarray) -> Tensor:
        h = self.lane_mlp(nodes)
        if nodes.shape[-2] == 0:
            return h
        for gat in self.lane_gat:
            h = gat(h, adj)
        return h

    def encode_bev(self, bev: Tensor) -> Tensor:
        return self.bev(bev)

    def fuse_scene(self, t_enc: Tensor, n_enc: Tensor, l_enc: Tensor, target_mask, neighbor_mask, lane_mask) -> Tensor:
        """Self-attention per modality, then target frames attend to lanes
        and to neighbours, both residually. No encoding is added along the
        agent axis, so the result ignores neighbour order."""
        t = t_enc + Tensor(self.time_pe[: t_enc.shape[-2]].astype(t_enc.dtype))
        t = self.target_ln(t + self.target_sa(t, t, t, key_mask=target_mask))
        s = t
        if l_enc.shape[-2] and lane_mask.any():
            lo = self.lane_ln(l_enc + self.lane_sa(l_enc, l_enc, l_enc, key_mask=lane_mask))
            s = s + self.to_lanes(s, lo, lo, key_mask=lane_mask)
        if n_enc.shape[-2] and neighbor_mask.any():
            no = self.neighbor_ln(n_enc + self.neighbor_sa(n_enc, n_enc, n_enc, key_mask=neighbor_mask))
            s = s + self.to_neighbors(s, no, no, key_mask=neighbor_mask)
        return s

    def forward(self, batch: SceneBatch) -> SceneEncoding:
        t_enc = self.encode_target(Tensor(batch.target), batch.target_mask)
        n_enc = self.encode_neighbors(Tensor(batch.neighbors), batch.neighbor_frames, batch.neighbor_mask)
        l_enc = self.encode_lanes(Tensor(batch.lanes), batch.lane_adj)
        if batch.bev is None:
            raise ConfigurationError("batch has no BEV rasters; rasterize scenes first")
        v_enc = self.encode_bev(Tensor(batch.bev))
        s_enc = self.fuse_scene(t_enc, n_enc, l_enc, batch.target_mask, batch.neighbor_mask, batch.lane_mask)
        return SceneEncoding(t_enc, n_enc, l_enc, v_enc, s_enc, batch.neighbor_mask, batch.lane_mask)
