"""Deterministic random streams fanned out from one master seed."""

import zlib

import numpy as np


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Independent generator keyed by ``(seed, purpose, index)``.

    The key is hashed with crc32 so streams do not depend on process state,
    thread counts or the order in which other streams are created.
    """
    key = (zlib.crc32(purpose.encode()), int(index))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def child_seeds(rng: np.random.Generator, n: int) -> list:
    return [np.random.default_rng(int(s)) for s in rng.integers(0, 2**63 - 1, size=n)]
