"""Named, splittable random streams.

Every stochastic site in the library draws from a stream identified by a
string name plus the master seed, so reordering call sites or adding new
ones never perturbs existing streams. Streams are Philox counter-based
generators keyed by a hash of (seed, name), which is stable across
platforms and numpy versions.
"""

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for stream `name` under `seed`."""
    digest = hashlib.blake2b(
        name.encode("utf-8"),
        digest_size=16,
        key=int(seed).to_bytes(8, "little", signed=False),
    ).digest()
    key = np.frombuffer(digest, dtype="<u8")
    return np.random.Generator(np.random.Philox(key=key))
