"""Named random streams.

Every stream is derived from ``(seed, *names)`` so that two purposes never
share state and results do not depend on call order elsewhere.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(_key, names)]))
