"""Deterministic, splittable random number generation.

Every source of randomness in the package is derived from a single integer
seed through a tree of named children. Each child is identified by the path
of names from the root, hashed into a Philox counter-based bit generator via
``numpy``'s SeedSequence, so:

* the same seed and path always yield the same stream, on any platform;
* distinct paths yield statistically independent streams;
* adding a new consumer never perturbs existing streams.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(name: str | int) -> int:
    if isinstance(name, int):
        return name
    return zlib.crc32(name.encode("utf-8"))


class RngTree:
    """A node in the seed-derivation tree.

    ``child(name)`` derives a subtree; ``generator()`` materializes the
    node's own stream. Both are pure: calling them repeatedly returns
    equivalent objects.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = path

    def child(self, name: str | int) -> "RngTree":
        return RngTree(self.seed, self.path + (_key(name),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"RngTree(seed={self.seed}, path={self.path})"
