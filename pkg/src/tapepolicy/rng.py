"""Counter-based random streams keyed by (seed, stream id).

Every draw in the package comes from a Philox generator keyed on the run
seed and a named stream, so no module touches global RNG state and two
streams never overlap.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(seed: int, stream_id: int | str) -> np.ndarray:
    if isinstance(stream_id, str):
        stream_id = zlib.crc32(stream_id.encode())
    return np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream_id) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)


def stream(seed: int, stream_id: int | str = 0, counter: int = 0) -> np.random.Generator:
    bitgen = np.random.Philox(key=stream_key(seed, stream_id))
    if counter:
        bitgen = bitgen.advance(counter)
    return np.random.Generator(bitgen)
