"""Named, counter-addressed random streams.

Every draw site asks for ``stream(seed, name, *counters)``; the generator is a
Philox instance keyed by a hash of the root seed, the stream name and the
counters, so any position can be reproduced without replaying earlier draws.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    words = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode()), *(int(c) for c in counters)]
    ss = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))
