"""Seeded random streams.

Every random draw in the package comes from a Philox (counter-based) generator
keyed by the 64-bit global seed. Independent streams are carved out of the
counter space: stream ``s`` starts at counter ``(0, 0, s_lo, s_hi)``, so streams
never overlap and a stream's output does not depend on which other streams were
used, or in which order. Named streams are mapped to integers with CRC-32.
"""
from __future__ import annotations

import zlib

import numpy as np

GENERATOR_NAME = "philox4x64"
_MASK64 = (1 << 64) - 1


def stream_id(*parts: int | str) -> int:
    """Fold a path of names/indices into one 64-bit stream index."""
    acc = 0
    for part in parts:
        if isinstance(part, str):
            value = zlib.crc32(part.encode("utf-8"))
        else:
            value = int(part) & _MASK64
        acc = (acc * 0x100000001B3 + value + 1) & _MASK64
    return acc


def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Return the generator for ``stream`` under ``seed``."""
    if seed < 0 or seed > _MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    sid = stream_id(*stream) if stream else 0
    counter = [0, 0, sid & 0xFFFFFFFF, sid >> 32]
    return np.random.Generator(np.random.Philox(key=seed, counter=counter))


def derive_seed(seed: int, *stream: int | str) -> int:
    """A child 64-bit seed, for handing to code that takes a plain seed."""
    return int(make_rng(seed, "derive", *stream).integers(0, 2**63, dtype=np.int64))
