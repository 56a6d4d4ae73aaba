"""Counter-based random streams.

Every random draw made by a chain is addressed by (chain, iteration,
block, stage).  The chain selects a Philox key derived from the master
seed; the remaining three words fill the high part of the Philox counter,
so streams never overlap and can be regenerated in any order.  Within a
stream, unit ``u`` of a block always consumes position ``u`` of the drawn
arrays, which makes within-block parallel updates independent of how the
units are split across workers.
"""

from __future__ import annotations

import numpy as np

STAGE_B = 1 << 20
STAGE_R = STAGE_B + 1
STAGE_S = STAGE_B + 2
STAGE_INIT = STAGE_B + 3
STAGE_PPC = STAGE_B + 4


def chain_key(seed: int, chain: int) -> np.ndarray:
    return np.random.SeedSequence([int(seed) & ((1 << 64) - 1), int(chain)]).generate_state(2, np.uint64)


class StreamFactory:
    """Produces the generator for one (iteration, block, stage) address."""

    def __init__(self, seed: int, chain: int = 0):
        self.seed = int(seed)
        self.chain = int(chain)
        self._key = chain_key(seed, chain)

    def stream(self, iteration: int, block: int, stage: int) -> np.random.Generator:
        counter = np.array([0, iteration, block, stage], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self._key, counter=counter))
