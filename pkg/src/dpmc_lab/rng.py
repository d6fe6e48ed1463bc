"""Seed discipline.

Every random quantity in the library is drawn from a named stream derived
from ``(master_seed, purpose_tag, index)``. The underlying bit generator is
Philox-4x64-10 (counter based), so streams with different derivation tuples
are statistically independent and a run is reproducible from its master
seed alone. Determinism is promised within one build of this package, not
across numpy versions or other implementations.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(master_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Return the named Philox stream for ``(master_seed, tag, index)``."""
    if master_seed < 0 or index < 0:
        raise ValueError("master_seed and index must be nonnegative")
    entropy = [int(master_seed), zlib.crc32(tag.encode("utf-8")), int(index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def substreams(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split ``rng`` into ``n`` independent child streams (Philox spawn)."""
    return list(rng.spawn(n))
