"""Named, seeded random substreams.

Every random draw in the package comes from ``substream(root_seed, *path)``.
The path is a sequence of names or integers (``"noise", client_id, epoch``),
so that changing how one component consumes randomness never shifts the
stream seen by another.
"""

from __future__ import annotations

import zlib

import numpy as np

_TWO_53 = float(1 << 53)


def _key(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"substream ids must be non-negative, got {part}")
        return int(part)
    # crc32 is stable across processes, unlike hash()
    return zlib.crc32(str(part).encode("utf-8")) | (1 << 32)


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(seed, *path)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))


def open_uniform(rng: np.random.Generator, size) -> np.ndarray:
    """Uniform draws on the open interval (0, 1) with 53-bit resolution."""
    ints = rng.integers(0, 1 << 53, size=size, dtype=np.int64)
    return (ints.astype(np.float64) + 0.5) / _TWO_53
