"""Deterministic random streams keyed by content, not by execution order.

Every stochastic stage derives its generator from a root seed plus a path of
tags (e.g. ``stream(seed, "bake", view, tile)``).  Streams are Philox
counter-based, so the same key always yields the same sequence regardless of
process, thread count, or the order tiles get scheduled in.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream"]


def _fold(path: tuple) -> int:
    """Stable 64-bit digest of a tag path (no salted Python hash())."""
    h = hashlib.blake2b(digest_size=8)
    for part in path:
        if isinstance(part, str):
            h.update(b"s" + part.encode("utf-8"))
        elif isinstance(part, (int, np.integer)):
            h.update(b"i" + int(part).to_bytes(16, "little", signed=True))
        else:
            raise TypeError(f"unsupported rng tag type: {type(part)!r}")
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, *path) -> np.random.Generator:
    """Generator for (seed, *path); identical keys give identical streams."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(_fold(path))])
    return np.random.Generator(np.random.Philox(key=key))
