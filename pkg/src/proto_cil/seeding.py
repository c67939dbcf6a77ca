"""Counter-based derivation of per-module random streams from one root seed.

Each consumer gets its own stream id, so adding a new consumer never shifts
the randomness of existing ones.
"""

import numpy as np

# Fixed stream ids; append only, never renumber.
STREAMS = {
    "synth": 0,
    "scenario": 1,
    "augment": 2,
    "rpca": 3,
    "cnn": 4,
    "ssf": 5,
    "projection_a": 6,
    "projection_b": 7,
    "lambda_split": 8,
}


def derive_rng(root_seed: int, stream: str, counter: int = 0) -> np.random.Generator:
    """Independent Generator for (root_seed, stream, counter)."""
    sid = STREAMS[stream]
    ss = np.random.SeedSequence(root_seed, spawn_key=(sid, counter))
    return np.random.default_rng(ss)


def derive_seed(root_seed: int, stream: str, counter: int = 0) -> int:
    """Scalar seed usable by APIs that take an int instead of a Generator."""
    sid = STREAMS[stream]
    ss = np.random.SeedSequence(root_seed, spawn_key=(sid, counter))
    return int(ss.generate_state(1)[0])
