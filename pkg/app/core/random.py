import numpy as np


# Stream identifiers for derive_rng keys
PRIOR_STREAM = 0
OUTER_STREAM = 1
INNER_STREAM = 2
NOISE_STREAM = 3
TRAIN_STREAM = 4
DESIGN_STREAM = 5
SPLIT_STREAM = 6
VERIFY_STREAM = 7


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, key...); same key gives the same stream."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))
