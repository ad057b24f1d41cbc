"""Seed derivation for reproducible, schedule-independent random streams."""

import zlib

import numpy as np


def key(name):
    """Stable 32-bit integer for a string label (Python's ``hash`` is salted)."""
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed, *keys):
    """Generator for the stream identified by ``(seed, *keys)``.

    Every key must be a non-negative integer or a string; strings are mapped
    through :func:`key`.  The same tuple always yields the same stream, no
    matter which worker asks for it or in which order.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        words.append(key(k) if isinstance(k, str) else int(k))
    return np.random.default_rng(words)


def subsample_rows(x, cap, rng):
    """Uniform subsample of at most ``cap`` rows without replacement, order kept."""
    if cap is None or len(x) <= cap:
        return x
    idx = np.sort(rng.choice(len(x), size=cap, replace=False))
    return x[idx]
