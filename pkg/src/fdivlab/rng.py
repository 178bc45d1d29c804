"""Deterministic random-stream construction.

Every stochastic routine in the package draws from streams built here, keyed
by (seed, trial, role).  Distinct roles within a trial, and distinct trials
within an experiment, get statistically independent generators, and the
mapping is reproducible across platforms and process/thread counts.
"""

import numpy as np

# Role labels -> stream indices.  Adding roles is append-only.
ROLE_STATE = "state"
ROLE_OBS = "obs"
ROLE_INIT = "init"

_ROLE_INDEX = {ROLE_STATE: 0, ROLE_OBS: 1, ROLE_INIT: 2}


def stream(seed: int, trial: int, role: str) -> np.random.Generator:
    """Return the generator for (seed, trial, role).

    The same triple always yields the same stream, and no other triple
    yields an overlapping one.
    """
    if role not in _ROLE_INDEX:
        raise ValueError(f"unknown stream role: {role!r}")
    if trial < 0:
        raise ValueError("trial index must be non-negative")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(trial), _ROLE_INDEX[role]])
    return np.random.default_rng(ss)
