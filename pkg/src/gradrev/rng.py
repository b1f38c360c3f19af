"""Named random streams split from a single integer seed.

Each consumer (data generation, parameter init, shuffling, probes) draws
from its own stream, so any one of them can be reproduced without replaying
the others.
"""
import zlib

import numpy as np

STREAMS = ("data", "init", "shuffle", "probe")


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    tag = zlib.crc32(name.encode())
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, tag, *map(int, keys)])
