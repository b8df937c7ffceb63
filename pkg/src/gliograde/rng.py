"""Named, seeded random streams.

Each purpose (weight init, patch sampling, ...) draws from its own PCG64
stream so that changing how often one consumer draws never perturbs another.
The stream key is derived with CRC32, not ``hash()``, which is salted per
process.
"""

import zlib

import numpy as np

from .errors import ConfigError

STREAMS = ("init", "patch-sampling", "augmentation", "dropout", "phantom")


def rng_stream(seed, stream_id, *extra):
    """Return a ``numpy.random.Generator`` for ``(seed, stream_id, *extra)``.

    ``extra`` integers select independent sub-streams, e.g. one per phantom
    case, so cohort members can be generated in any order.
    """
    if stream_id not in STREAMS:
        raise ConfigError(f"unknown rng stream {stream_id!r}; expected one of {STREAMS}")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
    key = zlib.crc32(stream_id.encode("utf-8"))
    entropy = [seed & 0xFFFFFFFF, seed >> 32, key, *(int(e) for e in extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
