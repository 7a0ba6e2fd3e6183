"""
Named, reproducible random streams.

Every random draw in the package comes from a numpy `Philox` counter-based
generator keyed by `SeedSequence(seed, spawn_key=(crc32(purpose), *index))`.
A stream is therefore a pure function of (seed, purpose, index): replicates
can run in any order or on any number of threads and still produce the same
numbers, and two purposes never share a stream.
"""
import zlib

import numpy as np


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def seed_sequence(seed: int, purpose: str, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(_purpose_key(purpose), *map(int, index)))


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(seed, purpose, *index)))


def derive_seed(seed: int, purpose: str, index: int) -> int:
    """A 63-bit child seed, used to hand whole replicates their own config seed."""
    state = seed_sequence(seed, purpose, index).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
