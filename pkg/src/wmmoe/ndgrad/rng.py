"""Seeded, platform-independent random streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def stream_id(name: str) -> int:
    """Stable 64-bit stream id for a string key (e.g. a parameter path)."""
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=(self.stream & (2**64 - 1),))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, stream_id(f"{self.stream}/{name}"))


def rng_stream(seed: int, stream: int | str = 0) -> np.random.Generator:
    if isinstance(stream, str):
        stream = stream_id(stream)
    return RngStream(int(seed), int(stream)).generator()
