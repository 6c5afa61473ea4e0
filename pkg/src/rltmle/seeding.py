"""Counter-mode seed derivation.

Every random draw in the package is keyed by ``(master_seed, *counters)``
through :class:`numpy.random.SeedSequence` spawn keys, so results do not
depend on the order in which work units execute.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(master: int, *keys: int) -> int:
    """A 63-bit integer seed determined by ``master`` and the counters ``keys``."""
    seq = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def key_hash(label: str) -> int:
    """Stable integer for a string label (CRC-32)."""
    return zlib.crc32(label.encode("utf-8"))


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    """Generator for bootstrap replicate ``b`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(b),)))
