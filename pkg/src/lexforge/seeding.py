"""Labeled seed derivation so each random stream is independent of call order."""

import hashlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    """Hash ``master`` and ``labels`` into a 64-bit seed."""
    h = hashlib.sha256(str(int(master)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))
