"""Seed fan-out.

A single root seed feeds independent counter-based (Philox) streams, one per
named consumer. Adding a consumer never shifts the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np

DEFAULT_SEED = 2025


def _consumer_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return the generator for consumer ``name`` under root ``seed``.

    ``extra`` integers (fold index, subject id, ...) further separate streams.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_consumer_key(name), *extra))
    return np.random.Generator(np.random.Philox(ss))
