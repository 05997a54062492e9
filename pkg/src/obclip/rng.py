"""Named counter-based random streams.

Every component draws from its own Philox stream keyed by the run seed and a
component name, so adding draws in one place never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np


def named_rng(seed: int, *names: str) -> np.random.Generator:
    key = tuple(zlib.crc32(name.encode()) for name in names)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))
