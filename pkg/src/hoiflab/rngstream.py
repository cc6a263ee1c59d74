"""Counter-based random streams keyed by (master_seed, rep, purpose).

Philox counters make every stream independent: adding a new purpose tag or
statistic never perturbs draws on existing streams, and replications can run
on any worker in any order.
"""

from __future__ import annotations

import hashlib

import numpy as np

_KEY_SALT = 0x9E3779B97F4A7C15  # fixed second key word


def _tag_hash(tag: str) -> int:
    return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")


def stream(master_seed: int, rep: int, tag: str) -> np.random.Generator:
    """Independent generator for one (replication, purpose) pair."""
    if rep < 0:
        raise ValueError(f"rep index must be >= 0, got {rep}")
    bitgen = np.random.Philox(
        counter=[0, 0, np.uint64(rep), np.uint64(_tag_hash(tag))],
        key=[np.uint64(master_seed & 0xFFFFFFFFFFFFFFFF), np.uint64(_KEY_SALT)],
    )
    return np.random.Generator(bitgen)
