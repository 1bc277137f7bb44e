from __future__ import annotations

import zlib

import numpy as np

# Monte Carlo work is cut into blocks of this many samples; each block owns a stream.
BLOCK_SIZE = 16384

_MASK64 = (1 << 64) - 1


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def derive_generator(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """
    Counter-based generator for one (purpose, *keys) task.

    Streams are a pure function of (seed, purpose, keys), so splitting work
    across threads or reordering tasks never changes a sample.
    """
    entropy = [int(seed) & _MASK64, _purpose_key(purpose), *[int(k) for k in keys]]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def block_sizes(total: int, block: int = BLOCK_SIZE) -> list[int]:
    """Split *total* samples into fixed-size blocks (last one may be shorter)."""
    if total <= 0:
        return []
    full, rest = divmod(int(total), int(block))
    return [block] * full + ([rest] if rest else [])
