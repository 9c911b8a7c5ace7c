"""Deterministic, splittable random streams.

Every source of randomness in the toolkit is a counter-based Philox
generator keyed by ``(seed, salt)``. Salts are derived from stable string
tags and integers (never from Python's salted ``hash``), so any stream can
be reproduced in isolation: per-node walk trials, per-partition sampling,
per-epoch resampling, and so on.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a(parts: tuple) -> int:
    h = _FNV_OFFSET
    for part in parts:
        if isinstance(part, str):
            data = part.encode("utf-8")
        elif isinstance(part, (int, np.integer)):
            data = int(part).to_bytes(16, "little", signed=True)
        else:
            raise TypeError(f"unsupported salt type: {type(part)!r}")
        for byte in data:
            h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def stream(seed: int, *salts) -> np.random.Generator:
    """Return a Generator for the (seed, salts) stream.

    Streams with distinct salts are statistically independent and may be
    consumed in any order or in parallel.
    """
    key = np.array([int(seed) & _MASK64, _fnv1a(salts)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive(seed: int, *salts) -> int:
    """Stable 63-bit sub-seed for nested seeding schemes."""
    return (_fnv1a((int(seed) & _MASK64, *salts))) & 0x7FFFFFFFFFFFFFFF
