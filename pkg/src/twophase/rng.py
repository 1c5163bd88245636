"""Counter-based random streams keyed by ``(master seed, stream id)``.

Every stochastic routine takes a :class:`Seed`. The generator state is a pure
function of the two 64-bit integers, so replicate ``r`` of an experiment gets
the same numbers no matter which worker runs it or in what order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix(*parts: int | str) -> int:
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class Seed:
    master: int
    stream: int = 0

    def __post_init__(self):
        for name in ("master", "stream"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or not 0 <= int(value) <= _MASK64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {value!r}")

    def generator(self) -> np.random.Generator:
        key = np.array([self.master, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *path: int | str) -> "Seed":
        """Derive an independent stream from this one and a path of labels."""
        return Seed(self.master, _mix(self.stream, *path))


def as_seed(seed: Seed | int) -> Seed:
    if isinstance(seed, Seed):
        return seed
    return Seed(int(seed))


def as_generator(seed: Seed | int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return as_seed(seed).generator()
