"""Named random streams derived from one master seed.

Every source of randomness in a run (selection, batching, model init,
noise) pulls from its own stream so that reordering one stage never
perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("init", "batching", "model-init", "noise", "eval")


def stream_seed(master_seed: int, name: str, index: int = 0) -> int:
    digest = hashlib.sha256(f"{master_seed}:{name}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master_seed: int, name: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master_seed, name, index))
