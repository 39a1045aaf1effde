"""Counter-based random draws keyed by (seed, stream, index).

Per-pixel randomness has to be addressable by global pixel index so that a
labeller evaluated on a crop produces the same draws as on the full map.
numpy generators are sequential, so a splitmix64 finalizer is used as a hash.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def keyed_uniform(seed, stream, index, draw=0):
    """Uniform floats in [0, 1), one per entry of ``index``.

    Identical ``(seed, stream, index, draw)`` always gives the identical value.
    """
    index = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _GOLDEN + np.uint64(stream & 0xFFFFFFFF))
        key = _mix(key + np.uint64(draw & 0xFFFF) * _GOLDEN)
        z = _mix(key ^ (index * _GOLDEN + _GOLDEN))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def frame_rng(seed, purpose, frame_index):
    """Independent numpy generator for one (purpose, frame) pair."""
    return np.random.default_rng([int(seed), int(purpose), int(frame_index)])
