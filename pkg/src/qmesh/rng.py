"""Seed-splitting randomness.

Every random draw in a run flows from one root seed through named
streams, so module behavior never depends on Python hash randomization
or call ordering across modules. Stream derivation uses blake2b, which
is stable across platforms and interpreter runs.
"""

from __future__ import annotations

import hashlib
import random


def derive_seed(root_seed: int, *labels: object) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(root_seed).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "big")


class RngHub:
    """Hands out independent random.Random streams keyed by label path."""

    def __init__(self, root_seed: int):
        self.root_seed = root_seed
        self._streams: dict[tuple, random.Random] = {}

    def stream(self, *labels: object) -> random.Random:
        key = tuple(labels)
        rng = self._streams.get(key)
        if rng is None:
            rng = random.Random(derive_seed(self.root_seed, *labels))
            self._streams[key] = rng
        return rng

    def fresh(self, *labels: object) -> random.Random:
        """One-shot stream; use when draws must be a pure function of the key."""
        return random.Random(derive_seed(self.root_seed, *labels))
