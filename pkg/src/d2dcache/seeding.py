"""Named, order-independent random substreams.

Every random quantity in the package is drawn from a generator derived from
a master seed plus a tuple of integers identifying *what* is being drawn
(e.g. ``(PROFILE, user, file)``).  Adding users or files, or evaluating in a
different order, never perturbs the streams of existing entities.
"""

import numpy as np

# stream tags
PROFILE = 1
SAMPLES = 2
POSITION = 3
LINK = 4
RANKS = 5
PROBABILISTIC = 6
REQUESTS = 7
UNICAST = 8
BROADCAST = 9
REPLICATE = 10
PAIR_PICK = 11


def substream(seed, *key):
    """Return a Generator for ``seed`` refined by the integer ``key``."""
    if isinstance(seed, np.random.SeedSequence):
        base = seed.entropy
        prefix = tuple(seed.spawn_key)
    else:
        base = int(seed)
        prefix = ()
    return np.random.default_rng(
        np.random.SeedSequence(base, spawn_key=prefix + tuple(int(k) for k in key)))


def derive_seed(seed, *key):
    """Derive a plain 63-bit integer seed, e.g. for per-replicate seeds."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
