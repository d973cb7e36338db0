"""Deterministic seed derivation.

All randomness flows from a single master seed; sub-components get child
seeds derived by hashing the master together with string/int tags, so the
derivation is stable across processes and platforms (unlike builtin hash).
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 63) - 1


def child_seed(master: int, *tags) -> int:
    """64-bit seed derived from (master, tags) via blake2b."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "big") & _MASK


def child_rng(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, *tags))


def text_fingerprint(text: str) -> str:
    """Short stable hex digest used to key log entries and caches."""
    return hashlib.blake2b(text.encode(), digest_size=8).hexdigest()
