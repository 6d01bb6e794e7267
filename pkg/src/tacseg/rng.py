"""Deterministic random streams.

Every random draw in the package comes from numpy's Philox4x64 counter-based
generator. A stream is keyed by the run seed plus a label path such as
``("init", "backbone.stage0.w")`` or ``("data", "train", 3)``; the key is the
first 128 bits of a BLAKE2b digest of both, so streams are independent of
creation order and of each other.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *labels) -> np.random.Generator:
    text = "/".join([str(int(seed))] + [str(x) for x in labels])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    key = np.frombuffer(digest, dtype="<u8").copy()
    return np.random.Generator(np.random.Philox(key=key))
