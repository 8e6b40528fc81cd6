"""Deterministic random-stream derivation.

All randomness in the package flows from a single master seed.  Named
streams are derived by hashing string/int keys into a ``SeedSequence``
spawn key, so that independent components (subjects, grid points,
pipeline stages) consume independent, reproducible streams regardless
of scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_ints(key) -> tuple[int, ...]:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be nonnegative")
        return (int(key),)
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return (int.from_bytes(digest[:8], "little"),)
    raise TypeError(f"unsupported stream key {key!r}")


def seed_sequence(master_seed: int, *keys) -> np.random.SeedSequence:
    """Return the SeedSequence for the named stream ``keys`` under ``master_seed``."""
    spawn_key: tuple[int, ...] = ()
    for key in keys:
        spawn_key = spawn_key + _key_to_ints(key)
    return np.random.SeedSequence(master_seed, spawn_key=spawn_key)


def generator(master_seed: int, *keys) -> np.random.Generator:
    """Return a PCG64 generator on the named stream."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *keys)))


def counter_rng(master_seed: int, *keys, counter: int = 0) -> np.random.Generator:
    """Return a Philox generator at a fixed counter position.

    Used by iteration-indexed draws (one generator per EM iteration):
    the draw at iteration ``t`` is a pure function of (seed, keys, t),
    independent of how work is partitioned across threads.
    """
    ss = seed_sequence(master_seed, *keys)
    bitgen = np.random.Philox(seed=ss, counter=[counter, 0, 0, 0])
    return np.random.Generator(bitgen)
