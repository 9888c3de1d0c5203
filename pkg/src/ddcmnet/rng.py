"""Seeded random streams.

All randomness (weight init, loss weights, patch sampling, scene synthesis)
comes from numpy's Philox4x64 counter-based generator.  A stream is named by
``(seed, *key)``; the key is fed to ``SeedSequence.spawn_key`` so distinct
consumers get independent, reproducible sequences regardless of call order
in other streams.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

ALGORITHM = "philox4x64-10"
MAX_SEED = 2**64 - 1


def _key_int(part) -> int:
    if isinstance(part, int):
        return part
    return zlib.crc32(str(part).encode("utf-8"))


@dataclass
class RngState:
    seed: int
    key: tuple = ()
    algorithm: str = field(default=ALGORITHM, init=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) <= MAX_SEED:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        self.seed = int(self.seed)
        seq = np.random.SeedSequence(self.seed, spawn_key=tuple(_key_int(k) for k in self.key))
        self._gen = np.random.Generator(np.random.Philox(seq))

    def stream(self, *key) -> RngState:
        """Independent child stream, a pure function of (seed, key path)."""
        return RngState(self.seed, self.key + key)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)
