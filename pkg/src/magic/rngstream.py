"""Named counter-based random streams.

Every source of randomness in the project is a Philox generator keyed by
(seed, tag) so any pipeline stage can be replayed in isolation and
parallel schedules cannot change results.
"""

import hashlib

import numpy as np


def stream(seed: int, *tags) -> np.random.Generator:
    """Return a fresh generator for the given seed and tag path."""
    label = ":".join(str(t) for t in tags)
    digest = hashlib.blake2b(
        label.encode("utf-8"), digest_size=16, key=int(seed).to_bytes(8, "little", signed=True)
    ).digest()
    key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(*parts) -> int:
    """Stable 63-bit integer seed from a tuple of labels."""
    label = ":".join(str(p) for p in parts)
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1
