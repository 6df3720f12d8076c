"""Binary checkpoint: magic, version, JSON header with a tensor manifest,
a little-endian payload, and a trailing SHA-256 over header and payload.

Loading is all-or-nothing: every check runs before any parameter is
touched.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..model import ModelConfig, WMMoE

MAGIC = b"WMMOECKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    arrays: dict[str, np.ndarray]
    frozen: set = field(default_factory=set)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: WMMoE, train_config: dict | None = None, extra: dict | None = None) -> "Checkpoint":
        arrays = {n: p.data for n, p in model.named_parameters()}
        frozen = {n for n, p in model.named_parameters() if not p.requires_grad}
        return cls(model.config.to_dict(), dict(train_config or {}), arrays, frozen, dict(extra or {}))

    def build_model(self) -> WMMoE:
        """Fresh model with these weights; frozen arrays are read-only."""
        model = WMMoE(ModelConfig(**self.model_config))
        if self.arrays:
            model.to_dtype(next(iter(self.arrays.values())).dtype)
        model.load_state_dict(self.arrays)
        for n, p in model.named_parameters():
            if n in self.frozen:
                p.requires_grad = False
                p.data = p.data.copy()
                p.data.setflags(write=False)
        return model


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    manifest, chunks, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        a = np.ascontiguousarray(ckpt.arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        manifest.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset,
                         "nbytes": len(raw), "frozen": name in ckpt.frozen})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "extra": ckpt.extra,
        "tensors": manifest,
    }, sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    digest = hashlib.sha256(header + payload).digest()
    Path(path).write_bytes(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + payload + digest)


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size + 32:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if start + hlen + 32 > len(blob):
        raise CheckpointError("truncated checkpoint header")
    header_raw = blob[start : start + hlen]
    payload = blob[start + hlen : -32]
    if hashlib.sha256(header_raw + payload).digest() != blob[-32:]:
        raise CheckpointError("checksum mismatch; file is corrupt or truncated")
    header = json.loads(header_raw)
    arrays, frozen, end = {}, set(), 0
    for t in sorted(header["tensors"], key=lambda t: t["offset"]):
        off, nb = t["offset"], t["nbytes"]
        if off < end or off + nb > len(payload):
            raise CheckpointError(f"manifest entry {t['name']} overlaps or exceeds the payload")
        end = off + nb
        dt = np.dtype(t["dtype"])
        a = np.frombuffer(payload, dtype=dt, count=nb // dt.itemsize, offset=off).reshape(t["shape"])
        arrays[t["name"]] = a.astype(dt.newbyteorder("="))
        if t["frozen"]:
            frozen.add(t["name"])
    return Checkpoint(header["model_config"], header["train_config"], arrays, frozen, header.get("extra", {}))
