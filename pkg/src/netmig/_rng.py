"""Counter-based random streams derived from one master seed.

Every stream is keyed by ``(purpose, *ids)`` so that adding agents or years
never perturbs the draws of existing ones.
"""
import zlib

import numpy as np

_PURPOSES = {}


def _purpose_code(purpose):
    code = _PURPOSES.get(purpose)
    if code is None:
        code = zlib.crc32(purpose.encode("utf-8"))
        _PURPOSES[purpose] = code
    return code


def stream(seed, purpose, *ids):
    """Return an independent ``numpy.random.Generator`` for one purpose/key."""
    key = (_purpose_code(purpose),) + tuple(int(i) & 0xFFFFFFFF for i in ids)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
