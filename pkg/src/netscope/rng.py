"""Deterministic random streams.

All randomness goes through Philox (a counter-based 64-bit generator).  A
stream is keyed by a seed plus any number of integer ids such as
``(epoch, image_index)``, so results never depend on execution order.
"""
from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64-10"


def stream(seed: int, *ids: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), *(int(i) for i in ids)])
    return np.random.Generator(np.random.Philox(ss))
