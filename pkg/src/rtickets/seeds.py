"""Deterministic seed derivation.

Every random draw in the package flows from a named seed derived here, so a
rerun with the same config and seed is byte-identical.  Derivation hashes the
(parent seed, label, indices...) path, which lets independent stages and
steps draw from non-overlapping streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK63 = (1 << 63) - 1


def derive_seed(*parts: int | str | float) -> int:
    """Derive a 64-bit seed from a path of labels/indices. Stable across runs."""
    key = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def np_rng(*parts: int | str | float) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))


def torch_seed(*parts: int | str | float) -> int:
    # torch generators want a non-negative int64
    return derive_seed(*parts) & _MASK63
