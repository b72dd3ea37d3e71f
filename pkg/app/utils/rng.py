"""Named random substreams derived from one run seed.

Every consumer (data shuffle, diffusion noise, masks, initialization, ...)
draws from its own PCG64 stream keyed by a stable name, so changing how much
randomness one component consumes never shifts another component's draws.
"""

from __future__ import annotations

import zlib

import numpy as np

SHUFFLE = "shuffle"
NOISE = "noise"
MASK = "mask"
INIT = "init"
SPLIT = "split"
VALIDATION = "validation"
SAMPLING = "sampling"
SYNTH = "synth"


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *extra: int | str) -> np.random.Generator:
    """Generator for ``name`` (plus optional sub-keys such as an epoch or image id)."""
    keys = [stream_key(name)]
    for e in extra:
        keys.append(stream_key(e) if isinstance(e, str) else int(e))
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(keys))
    return np.random.Generator(np.random.PCG64(sequence))
