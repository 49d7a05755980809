"""Named, splittable random streams.

Every random draw in the package comes from a generator derived from
``(seed, *path)``. Paths are hashed with CRC32 into the spawn key of a
:class:`numpy.random.SeedSequence` feeding a counter-based Philox bit
generator, so two streams with different names never share state and the
same name always reproduces the same draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)) and not isinstance(part, bool):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(seed: int, *path) -> np.random.Generator:
    """Return an independent generator for ``seed`` and the named ``path``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


class RngStream:
    """A seed plus a name path; :meth:`child` splits, :meth:`generator` draws."""

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)

    def child(self, *names) -> "RngStream":
        return RngStream(self.seed, self.path + names)

    def generator(self) -> np.random.Generator:
        return make_rng(self.seed, *self.path)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"
