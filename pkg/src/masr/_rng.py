"""Seed derivation.

Every random draw in the package comes from ``rng_for(root_seed, *keys)`` so
that any component can be regenerated in isolation from the root seed.
"""

import zlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("seed keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def seed_sequence(seed, *keys):
    return np.random.SeedSequence([int(seed)] + [_key_to_int(k) for k in keys])


def rng_for(seed, *keys):
    """Independent generator for ``(seed, *keys)``; strings are hashed stably."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def derive_seed(seed, *keys):
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint32)[0])
