"""Seed derivation.

Every random stream in the package is addressed by ``(seed, label, *index)``.
The label is hashed with CRC-32 so that streams for different purposes never
collide, and the stream for a given replicate does not depend on how work is
scheduled across processes.
"""
import zlib

import numpy as np


def _key(label):
    return zlib.crc32(label.encode("utf-8"))


def seed_sequence(seed, label, *index):
    return np.random.SeedSequence(int(seed), spawn_key=(_key(label),) + tuple(int(i) for i in index))


def rng_for(seed, label, *index):
    """Generator for stream ``label`` / ``index`` under the top-level ``seed``."""
    return np.random.default_rng(seed_sequence(seed, label, *index))


def child_seed(seed, label, *index):
    """A 63-bit integer seed derived from the parent, for APIs that take ints."""
    return int(seed_sequence(seed, label, *index).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
