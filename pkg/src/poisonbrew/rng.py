"""Named, counter-based random streams.

A stream is keyed by an integer seed plus a path of names/integers, e.g.
``stream(seed, "victim", 3, "shuffle", epoch)``. Streams never depend on
call order or on which worker consumes them.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *path) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed: int, *path) -> int:
    """A 63-bit integer seed derived from ``seed`` and ``path``."""
    return int(stream(seed, "derive", *path).integers(0, 2**63 - 1))
