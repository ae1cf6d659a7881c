"""Named random sub-streams derived from one integer seed."""

from __future__ import annotations

import os
import zlib

import numpy as np

SEED_ENV = "IHAN_SEED"
DEFAULT_SEED = 0


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name`` ("balance", "split", "init", ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def resolve_seed(seed: int | None) -> int:
    """Explicit seed, else $IHAN_SEED, else 0."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else DEFAULT_SEED
