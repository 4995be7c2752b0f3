"""Seeded random streams shared by every party of a run.

All randomness is drawn from numpy's PCG64 bit generator. A stream is named
by a tuple of non-negative integers passed to ``SeedSequence``, so the same
(seed, purpose, round, ...) key yields the same draws on any platform.
"""

import numpy as np

# Stream purposes; the first word after the run seed.
REACTIVATION = 1
ENCRYPTION = 2
KEYGEN = 3
PARTITION = 4
MODEL_INIT = 5
SYNTH = 6
CALIBRATION = 7


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return a generator for the stream (seed, *key)"""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in key]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
