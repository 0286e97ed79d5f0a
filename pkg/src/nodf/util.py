"""Small shared helpers: seeded RNG substreams and error types."""

import zlib

import numpy as np


class InvalidArgument(ValueError):
    """Precondition violation on a public operation."""


class Diverged(RuntimeError):
    """Training or a likelihood evaluation produced a non-finite value."""


class IllConditioned(RuntimeError):
    """A factorization failed beyond the jitter retry."""


def substream(seed, *tags):
    """Generator for a named substream of the master seed.

    Tags may be short strings or ints; the same (seed, tags) always yields the
    same stream, independent of platform and call order.
    """
    keys = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            keys.append(zlib.crc32(t.encode("utf8")))
        else:
            keys.append(int(t) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(keys))
