"""Keyed random substreams.

Every random quantity in a run is drawn from a Philox generator whose key is
derived from ``(seed, *stream_id)``.  Streams never depend on the order in
which they are created, so replications can run on any number of threads and
still reproduce bit-for-bit.
"""

from __future__ import annotations

import numpy as np

# Purpose tags used as the first element of a stream id.
TRAJECTORY = 0
FILTER = 1
DIAGNOSTIC = 2


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for the substream ``key`` of ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *key: int) -> int:
    """Derive a 64-bit child seed, e.g. the seed recorded on a trajectory."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
