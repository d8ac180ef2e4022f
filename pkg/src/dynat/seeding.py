"""Deterministic RNG construction.

All randomness in the package flows through make_rng so that a run is a
pure function of its seeds.  Philox is counter-based: the stream for a
given key is stable across processes and platforms.
"""

import hashlib

import numpy as np


def _as_word(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"rng key parts must be int or str, got {type(part).__name__}")


def make_rng(*key) -> np.random.Generator:
    """Build a Generator keyed by a tuple of ints/strings.

    Distinct keys give independent streams; the same key always gives the
    same stream.
    """
    if not key:
        raise TypeError("make_rng needs at least one key part")
    words = [_as_word(part) for part in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def derive_seed(*key) -> int:
    """Fold a key tuple into one integer seed, collision-resistant via
    hashing; used to hand sub-seeds to APIs that take a single int."""
    joined = b"\x1f".join(str(_as_word(part)).encode() for part in key)
    return int.from_bytes(hashlib.sha256(joined).digest()[:8], "little")
