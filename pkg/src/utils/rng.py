from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    """Independent random streams within one (path, period) cell."""

    THETA = 0
    KERNEL = 1
    INTRA_PERIOD = 2
    PERTURBATION = 3


def stream(seed: int, path: int, period: int, kind: Stream) -> np.random.Generator:
    """Counter-based generator keyed by (seed, path, period, kind).

    Philox is addressed by the hashed key, so a path's draws never depend on which
    worker runs it or on how many other paths exist.
    """
    key = np.random.SeedSequence([int(seed), int(path), int(period), int(kind)])
    return np.random.Generator(np.random.Philox(key))
