import hashlib

import numpy as np


def derive_seed(seed: int, *keys) -> int:
    """Stable 31-bit child seed from a parent seed and any str/int keys."""
    h = hashlib.sha256(repr((int(seed),) + tuple(str(k) for k in keys)).encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys) if keys else seed)
