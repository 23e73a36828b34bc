"""Seed derivation.

Every random draw in the package comes from a Philox (counter-based, 64-bit)
generator keyed by ``derive_seed(master, *labels)``. The key is the first
8 bytes of BLAKE2b over the colon-joined labels, so the stream for e.g.
``(1234, "retain", 17)`` is the same on any platform.
"""

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    text = ":".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def make_rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_seed(*parts)))
