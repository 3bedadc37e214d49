"""Seed-stream derivation.

Every random draw in a run comes from ``stream(seed, purpose, *keys)``: a PCG64
generator seeded with ``SeedSequence([seed, crc32(purpose), *keys])``. Streams
used by the package:

==============  ======================  ===========================================
purpose         keys                    draws
==============  ======================  ===========================================
``data``        --                      synthetic attributes, feature map, samples
``split``       --                      seen/unseen class selection
``partition``   --                      client class/sample assignment
``subsample``   --                      partial-data ratio subsampling
``init``        --                      global model initialisation
``shuffle``     client, round           local batch order
``warmup``      client                  FMD auto-threshold warmup batches
``inject``      client, round           backdoor slot replacement and noise
``malicious``   client                  malicious sample generation
``sample``      round                   per-round client sampling
==============  ======================  ===========================================

Any sub-draw can therefore be reproduced in isolation from the master seed.
"""

from __future__ import annotations

import zlib

import numpy as np


def purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    entropy = [int(seed), purpose_code(purpose), *(int(k) for k in keys)]
    if any(v < 0 for v in entropy):
        raise ValueError(f"seed stream keys must be non-negative: {entropy}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
