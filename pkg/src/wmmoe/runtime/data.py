"""Scene preparation and batching for training and evaluation."""

from __future__ import annotations

from dataclasses import replace
from typing import Iterator, Sequence

import numpy as np

from ..perception import SceneBatch, collate
from ..scenes import DEFAULT_BEV, Scene, rasterize_bev, to_target_frame


def prepare_scenes(scenes: Sequence[Scene], bev_shape=DEFAULT_BEV, m_per_px: float = 1.0) -> list[Scene]:
    """Target-frame scenes, each with a BEV raster of the requested shape."""
    out = []
    C, H, W = bev_shape
    for s in scenes:
        s = to_target_frame(s)
        if s.bev is None or s.bev.shape != tuple(bev_shape):
            s = replace(s, bev=rasterize_bev(s, C, H, W, m_per_px))
        out.append(s)
    return out


def iter_batches(scenes: Sequence[Scene], batch_size: int, order=None, dtype=np.float64) -> Iterator[tuple[np.ndarray, SceneBatch]]:
    idx = np.arange(len(scenes)) if order is None else np.asarray(order)
    for start in range(0, len(idx), batch_size):
        sel = idx[start : start + batch_size]
        yield sel, collate([scenes[i] for i in sel], dtype=dtype)
