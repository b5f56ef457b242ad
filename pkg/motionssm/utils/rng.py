"""Deterministic random streams.

Every random draw in the package comes from a counter-based Philox
generator keyed by a SeedSequence of ``[seed, *stream]``. Distinct stream
tuples give statistically independent generators, so seeds, sequences
and Monte-Carlo chunks can be processed in any order (or in parallel)
and still reproduce bit for bit.
"""

import numpy as np

# Stream identifiers used across the package. Keeping them here avoids
# two components accidentally drawing from the same stream.
STREAM_SIMULATE = 1
STREAM_PHANTOM = 2
STREAM_BASIS = 3
STREAM_DYNAMICS = 4
STREAM_OBS_NOISE = 5
STREAM_ENCODER = 6
STREAM_POSTERIOR = 7
STREAM_FORECAST = 8
STREAM_PRETRAIN = 9
STREAM_CALIBRATION = 10


def _seed_sequence(
    seed: int, stream: tuple[int, ...]
) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *(int(s) for s in stream)])


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    bit_generator = np.random.Philox(_seed_sequence(seed, stream))
    return np.random.Generator(bit_generator)


def derive_seed(seed: int, *stream: int) -> int:
    # 63 bits keeps the value a valid non-negative int64
    state = _seed_sequence(seed, stream).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & (2**63 - 1)
