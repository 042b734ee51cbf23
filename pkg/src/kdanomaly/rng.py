"""Explicit, splittable random number generation.

Nothing in the package touches numpy's global random state.  Callers pass an
``int`` seed, a :class:`numpy.random.SeedSequence` or a ready
:class:`numpy.random.Generator`; sub-streams are derived by spawning.
"""

import hashlib
from typing import Union

import numpy as np

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator]


def stable_hash(text: str) -> int:
    """64-bit hash of ``text`` that is stable across processes and runs."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(seed: SeedLike, *keys) -> np.random.SeedSequence:
    """Build a seed sequence, optionally keyed by strings or integers."""
    if isinstance(seed, np.random.Generator):
        base = int(seed.integers(0, 2**63))
        ss = np.random.SeedSequence(base)
    elif isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(int(seed))
    if keys:
        extra = [stable_hash(k) if isinstance(k, str) else int(k) for k in keys]
        ss = np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(extra))
    return ss


def make_rng(seed: SeedLike, *keys) -> np.random.Generator:
    if isinstance(seed, np.random.Generator) and not keys:
        return seed
    return np.random.default_rng(seed_sequence(seed, *keys))


def derive_seed(seed: SeedLike, *keys) -> int:
    """Integer seed for a named sub-stream."""
    return int(seed_sequence(seed, *keys).generate_state(1, np.uint64)[0] >> np.uint64(1))
