"""Counter-based random streams.

Every source of randomness in the package draws from a Philox generator
keyed by (seed, stream, substream), so independent components can consume
randomness in any order without perturbing each other and runs replay
bit-exactly from the seed alone.
"""

import hashlib

import numpy as np

# Stream ids, one per randomness consumer.
INIT = 0          # parameter initialisation
DATA = 1          # batch sampling / crop offsets
CORRUPT = 2       # code-row corruption
COND_DROP = 3     # condition dropout
SAMPLE = 4        # generation sampling
RESET = 5         # codebook reset draws
SYNTH = 6         # synthetic motion generation
DROPOUT = 7       # transformer dropout masks


def stream(seed: int, stream_id: int, sub: int = 0) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64((stream_id << 32) | (sub & 0xFFFFFFFF))],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def seed_from_text(text: str) -> int:
    """Stable 64-bit seed derived from a string (endianness-independent)."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
