"""Named, splittable random streams.

Every stochastic consumer gets its own generator whose seed is a hash of
``(master_seed, tag, *index)``. Two consumers never share state, so results
do not depend on the order (or the threads) in which they run.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, tag: str, *index: int) -> int:
    """128-bit seed from a blake2b digest of the stream name."""
    key = f"{int(master_seed)}|{tag}|" + ",".join(str(int(i)) for i in index)
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream(master_seed: int, tag: str, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, tag, *index)))
