"""Purpose-scoped random streams.

Every consumer of randomness asks for its own generator keyed by
``(seed, purpose, index)`` so that, e.g., changing how many masking draws
happen never perturbs data shuffling.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    tag = zlib.crc32(purpose.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag, int(index)]))
