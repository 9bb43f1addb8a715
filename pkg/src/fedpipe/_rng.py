"""Counter-based random substreams.

Every random draw in a run comes from a generator keyed by
``(master_seed, stream name, *integer keys)``. Streams never share state, so
changing one substream (say, the attacker seed) leaves every other draw intact,
and a run can be resumed at any round without saving generator state.
"""
from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, name, *keys)``."""
    if any(int(k) < 0 for k in keys):
        raise ValueError(f"substream keys must be non-negative, got {keys}")
    ss = np.random.SeedSequence(
        entropy=int(seed), spawn_key=(_name_key(name),) + tuple(int(k) for k in keys)
    )
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, an int seed or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
