"""Deterministic named RNG streams.

One root seed per run is split into independent named streams (init, noise,
target, bernoulli, epsilon, shuffle, probe, ...) so that toggling one
consumer never perturbs the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Derive the named child generator of a root seed.

    The same (seed, name) pair always yields the same stream, on every
    platform; distinct names yield statistically independent streams.
    """
    tag = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def streams(seed: int, names: list[str]) -> dict[str, np.random.Generator]:
    return {name: stream(seed, name) for name in names}
