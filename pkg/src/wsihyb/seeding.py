"""Derive independent random streams from one 64-bit seed."""

import zlib

import numpy as np


def derive_seed_sequence(seed, *labels):
    """Child SeedSequence for ``seed`` keyed by a path of string/int labels.

    The mapping is stable across runs and platforms: string labels are
    hashed with CRC32, integers are used verbatim.
    """
    key = []
    for label in labels:
        if isinstance(label, str):
            key.append(zlib.crc32(label.encode("utf-8")))
        else:
            key.append(int(label))
    return np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(key))


def derive_rng(seed, *labels):
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, *labels)))
