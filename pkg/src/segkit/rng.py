"""Deterministic random streams.

Every stream is a numpy ``PCG64`` bit generator (PCG-XSL-RR 128/64, O'Neill
2014). Seeding goes through ``SeedSequence`` so a (seed, key...) tuple maps
to the same 128-bit state on every platform. Test vectors for the raw
64-bit output live in ``tests/test_rng.py``.
"""

from __future__ import annotations

import numpy as np


class RngStream:
    """Seeded random stream with an explicit, serializable position."""

    def __init__(self, seed: int, *keys: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        self._bitgen = np.random.PCG64(np.random.SeedSequence([self.seed, *self.keys]))
        self._gen = np.random.Generator(self._bitgen)

    def derive(self, *keys: int) -> "RngStream":
        """Independent child stream; does not advance this one."""
        return RngStream(self.seed, *self.keys, *keys)

    # state ------------------------------------------------------------------
    def get_state(self) -> tuple[int, int, int, int]:
        st = self._bitgen.state
        return (
            int(st["state"]["state"]),
            int(st["state"]["inc"]),
            int(st["has_uint32"]),
            int(st["uinteger"]),
        )

    def set_state(self, state: tuple[int, int, int, int]) -> None:
        s, inc, has32, uint = state
        self._bitgen.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(s), "inc": int(inc)},
            "has_uint32": int(has32),
            "uinteger": int(uint),
        }

    # draws ------------------------------------------------------------------
    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n)

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self._gen.uniform(low, high, shape)

    def normal(self, shape=None, scale=1.0):
        return self._gen.normal(0.0, scale, shape)

    def exponential(self, shape=None):
        return self._gen.exponential(1.0, shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, keys={self.keys})"
