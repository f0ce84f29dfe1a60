"""Deterministic random-stream derivation from a single master seed.

Every stochastic consumer (init, dropout, noise, data) derives its own
generator by seeding with the master seed plus a label path, so streams
are independent and any one of them is reproducible in isolation.
"""

import zlib

import numpy as np


def _label_entropy(label):
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("seed path integers must be non-negative")
        return int(label)
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    raise TypeError("seed path labels must be int or str, got %r" % (label,))


def seed_sequence(master_seed, *path):
    """SeedSequence for the stream identified by (master_seed, *path)."""
    entropy = [int(master_seed)] + [_label_entropy(p) for p in path]
    return np.random.SeedSequence(entropy)


def generator(master_seed, *path):
    """Independent Generator for the stream identified by the path."""
    return np.random.default_rng(seed_sequence(master_seed, *path))
