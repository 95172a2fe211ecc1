"""Seeded random streams.

Each consumer (data, partition, per-device init/training/async/privacy, cloud,
device selection) draws from its own ``numpy`` generator so that adding or
removing one consumer never shifts another's sequence.
"""

import numpy as np

DATA = 0
PARTITION = 1
INIT = 2
TRAIN = 3
ARCH = 4
SELECT = 5
ASYNC = 6
PRIVACY = 7

CLOUD_INDEX = 1_000_003


def rng_for(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(index)])
