# utils.py
"""Seeded random streams.

Every stochastic step draws from a Philox (counter-based) generator keyed by the
full tuple that identifies it, e.g. ``(master_seed, STREAM_ROW, row)``. Results
therefore do not depend on generation order or on how work is split across
threads and processes.
"""
import numpy as np

SEED_LIMIT = 2 ** 64

# stream labels
STREAM_SHAPE = 1
STREAM_ROW = 2
STREAM_SCENE = 3
STREAM_POISSON = 4
STREAM_PLACEMENT = 5
STREAM_CROP = 6
STREAM_KID = 7
STREAM_SPLIT = 8
STREAM_GENERATION = 9


def check_seed(seed):
    """Return ``seed`` as int, rejecting values outside the unsigned 64-bit range."""
    if isinstance(seed, bool) or int(seed) != seed:
        raise ValueError(f"seed must be an integer, got {seed!r}")
    seed = int(seed)
    if not 0 <= seed < SEED_LIMIT:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


class SeedStream:
    """A keyed random stream: ``SeedStream(seed, STREAM_ROW, 3).rng``."""

    def __init__(self, *key):
        if not key:
            raise ValueError("SeedStream needs at least one key element")
        self.key = tuple(check_seed(k) for k in key)

    def _sequence(self):
        return np.random.SeedSequence(list(self.key))

    @property
    def rng(self):
        return np.random.Generator(np.random.Philox(self._sequence()))

    def derive(self):
        """A 64-bit seed derived from the key, for handing to a child stream."""
        lo, hi = self._sequence().generate_state(2, dtype=np.uint32)
        return (int(hi) << 32) | int(lo)

    def child(self, *key):
        return SeedStream(*self.key, *key)


def derive_seed(*key):
    return SeedStream(*key).derive()
