"""Seeded, splittable randomness.

Every source of randomness in the package flows through an RngStream: a
(seed, stream_id) pair backed by the counter-based Philox bit generator.
Streams with equal (seed, stream_id) replay identical sequences; distinct
stream_ids are statistically independent, so task generation can be
parallelized or reordered without changing any output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """A fresh Generator positioned at the start of this stream."""
        key = [self.seed & _MASK64, self.stream_id & _MASK64]
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, offset: int) -> "RngStream":
        """Derive an independent substream; offsets must be unique per use."""
        return RngStream(self.seed, (self.stream_id + offset) & _MASK64)
