"""Deterministic RNG derivation.

Every random draw in the package flows from explicit integer key tuples via
``SeedSequence``; there is no wall-clock entropy anywhere. Stream tags keep
the consumers (data generation, batching, network init, noise, theory, splits)
on independent streams even when they share a user seed.
"""

from __future__ import annotations

import numpy as np

# Stream tags; first element of every key tuple.
DATA_SYNTH = 11
DATA_SYNTH_DOMAIN = 12
DATA_BATCH = 13
SS_INIT = 21
AS_INIT = 22
SS_EPOCH = 23
AS_EPOCH = 24
THEORY = 31
PAD_SPLIT = 32


def derive_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1)[0])
