"""Counter-based RNG fan-out.

Every random consumer gets its own Philox stream keyed by
``(master_seed, purpose, *indices)``, so results do not depend on the order in
which clients or runs execute.
"""

from __future__ import annotations

import numpy as np

_PURPOSES = {"init": 0, "data": 1, "partition": 2, "client": 3, "rebalance": 4}


def seed_sequence(master: int, purpose: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=(_PURPOSES[purpose], *(int(k) for k in keys)))


def stream(master: int, purpose: str, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(master, purpose, *keys)))


def substreams(ss: np.random.SeedSequence, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.Philox(child)) for child in ss.spawn(n)]
