"""Deterministic seed derivation.

All randomness in the package flows from explicit integer seeds through
counter-based Philox generators. Derived seeds are pure functions of a root
seed plus a structured key (stream id, epoch, iteration, ...), so consumers
never share or advance a common stream: adding one more draw somewhere cannot
shift anybody else's randomness, and resuming mid-run needs no saved RNG
state.
"""

import numpy as np

# Stream identifiers. Values are arbitrary but frozen: changing them changes
# every derived seed.
STREAM_INIT = 1
STREAM_DATA = 2
STREAM_SPLIT = 3
STREAM_SHUFFLE_LABELED = 4
STREAM_SHUFFLE_UNLABELED = 5
STREAM_DROPOUT = 6
STREAM_MC = 7
STREAM_VAT = 8
STREAM_DIVERSITY = 9
STREAM_MC_EVAL = 10
STREAM_AUGMENT = 11
STREAM_TEST_DATA = 12


def derive_seed(root: int, *key: int) -> int:
    """Map (root, key...) to a 64-bit seed, deterministically."""
    ss = np.random.SeedSequence(root, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_from(seed: int) -> np.random.Generator:
    """Philox generator for one explicit seed."""
    return np.random.Generator(np.random.Philox(seed))


def derived_rng(root: int, *key: int) -> np.random.Generator:
    return rng_from(derive_seed(root, *key))
