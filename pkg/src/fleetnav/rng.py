"""Seedable, splittable random streams.

Every stochastic component in the package draws from a named stream derived
from a 64-bit root seed.  The generator is Philox-4x64-10, a published
counter-based algorithm, so any implementation of Philox can reproduce the
streams given the derivation rule below:

    key = root_seed * 2**64 + fnv1a64(label_0 + "/" + label_1 + ...)

i.e. a 128-bit Philox key whose high word is the root seed and whose low
word is the FNV-1a 64-bit hash of the "/"-joined stream labels.  The
counter starts at zero.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(text: str) -> int:
    """FNV-1a 64-bit hash of the UTF-8 encoding of `text`."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def stream_key(seed: int, *labels: str) -> int:
    """128-bit Philox key for the stream named by `labels` under `seed`."""
    if not (0 <= int(seed) <= _MASK64):
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return (int(seed) << 64) | fnv1a64("/".join(labels))


def stream(seed: int, *labels: str) -> Generator:
    """A fresh generator for the named stream. Same (seed, labels) always
    yields an identical sequence, independent of any other stream."""
    return Generator(Philox(key=stream_key(seed, *labels)))
