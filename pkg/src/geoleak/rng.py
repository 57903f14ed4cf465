"""Counter-based randomness.

Every random draw is a pure function of ``(seed, stream, *counters)``, so
results do not depend on evaluation order and per-user / per-slot work can
be split across workers freely.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# stream ids, kept stable so reruns with older configs stay reproducible
SPLITS = 1
GRAPH = 2
MOBILITY = 3
TRACES = 4
PARAMS = 5


def _mix(x):
    # splitmix64 finalizer; uint64 arithmetic wraps by design
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def counter_uniform(seed, stream, *counters):
    """Uniform [0, 1) draws indexed by integer counters (broadcast together)."""
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        h = _mix(h ^ (np.uint64(stream) * _GOLDEN))
        for c in counters:
            c = np.asarray(c).astype(np.uint64)
            h = _mix(h ^ (c + _GOLDEN))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def generator(seed, stream, *keys):
    """A numpy Generator whose state depends only on ``(seed, stream, *keys)``."""
    return np.random.default_rng([int(seed), int(stream), *(int(k) for k in keys)])
