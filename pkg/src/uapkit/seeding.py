"""Deterministic seed derivation.

Every pipeline stage derives its own seed from the root seed and a named
path, so repeating a single stage with the same (root, path) reproduces it
bit-for-bit without rerunning the stages before it.
"""

from __future__ import annotations

import zlib

import numpy as np

_SEED_MOD = 2**31 - 1


def _encode(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"seed path parts must be str or int, got {type(part)!r}")


def substream_seed(root_seed: int, *path) -> int:
    """Derive a stable seed for the named substream of ``root_seed``.

    Uses numpy's SeedSequence, which is platform independent, so the same
    (root, path) always yields the same seed.
    """
    entropy = [int(root_seed) & 0xFFFFFFFF] + [_encode(p) for p in path]
    ss = np.random.SeedSequence(entropy)
    return int(ss.generate_state(1, np.uint64)[0] % _SEED_MOD)


def rng_for(root_seed: int, *path) -> np.random.Generator:
    """Generator seeded from the named substream."""
    return np.random.default_rng(substream_seed(root_seed, *path))
