"""Seeded random-stream derivation.

Every source of randomness in a run is drawn from a named substream of one
root seed, so changing e.g. the shuffle order of one stage never perturbs
corpus generation or weight init.
"""

import hashlib

import numpy as np


def _stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Derive an independent generator for ``name`` from the root seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=root_seed, spawn_key=(_stream_key(name),)))
