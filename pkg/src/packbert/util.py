"""Deterministic hashing and RNG-stream derivation shared across modules.

Every stochastic choice in the pipeline flows through a Philox generator
keyed by (seed, purpose, index), so any single decision can be replayed
without replaying the whole run.
"""

from __future__ import annotations

import hashlib

import numpy as np

_U64 = (1 << 64) - 1

# Purpose words keep streams for different jobs disjoint even when the
# same (seed, index) pair shows up in more than one place.
PURPOSE_ORDER = 0x6F72646572696E67  # epoch shuffling
PURPOSE_MASK = 0x6D61736B6D61736B  # per-sequence corruption draws
PURPOSE_DROP = 0x64726F706F757473  # per-sequence dropout seeds
PURPOSE_DATA = 0x646174616467656E  # synthetic data generation
PURPOSE_NIAH = 0x6E6565646C657321  # haystack construction


def derived_rng(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, purpose, index) triple."""
    key = np.array([seed & _U64, (purpose ^ index) & _U64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derived_seed(seed: int, purpose: int, index: int = 0) -> int:
    """64-bit sub-seed, for APIs that take a seed rather than a Generator."""
    h = hashlib.blake2b(digest_size=8)
    for part in (seed & _U64, purpose & _U64, index & _U64):
        h.update(int(part).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def blake_hex(*chunks: bytes, digest_size: int = 16) -> str:
    h = hashlib.blake2b(digest_size=digest_size)
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def dataset_digest(sequences) -> str:
    """Order-sensitive fingerprint of a token dataset.

    Covers both lengths and contents, so any edit, reorder, insertion or
    removal changes the digest.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(len(sequences).to_bytes(8, "little"))
    for seq in sequences:
        arr = np.ascontiguousarray(np.asarray(seq, dtype=np.int32))
        h.update(arr.shape[0].to_bytes(8, "little"))
        h.update(arr.tobytes())
    return h.hexdigest()


def params_digest(params: dict) -> str:
    """Fingerprint of a named tensor dict; name order does not matter."""
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("ascii"))
        h.update(repr(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()
