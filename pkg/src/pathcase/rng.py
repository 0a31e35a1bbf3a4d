"""Named, splittable random streams.

Every stochastic operation in the package takes an explicit
``numpy.random.Generator``.  Streams are derived from a root seed plus a
path of names, so any sub-computation can be replayed in isolation.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key parts must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *path) -> np.random.Generator:
    """Return a Philox (counter-based) generator for ``seed`` and a name path.

    Distinct paths give statistically independent streams; the same path
    always gives the same stream.
    """
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def child(rng: np.random.Generator, *path) -> np.random.Generator:
    """Derive a sub-stream from an existing generator.

    Consumes one 63-bit draw from ``rng``, then keys the child by ``path``.
    """
    root = int(rng.integers(0, 2**63 - 1))
    return stream(root, *path)


def torch_seed(rng: np.random.Generator) -> int:
    """Draw a seed for torch's global generator (dropout, stochastic depth)."""
    return int(rng.integers(0, 2**62))
