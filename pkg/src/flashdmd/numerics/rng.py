"""Counter-based random streams.

Backed by numpy's Philox bit generator, keyed by ``(seed, stream_id)`` so
independent streams can be split deterministically and their full state
round-trips through JSON.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Rng:
    """Deterministic Gaussian/uniform source for one logical stream."""

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream must be non-negative")
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence([self.seed, self.stream])
        self._bitgen = np.random.Philox(ss)
        self._gen = np.random.Generator(self._bitgen)

    def split(self, stream: int) -> "Rng":
        """A new stream derived from the same seed; independent of this one's position."""
        return Rng(self.seed, stream)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=tuple(shape))

    def uniform(self, shape=None) -> np.ndarray | float:
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size=None, p=None):
        return self._gen.choice(n, size=size, p=p)

    def get_state(self) -> dict:
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(c) for c in st["state"]["counter"]],
            "key": [int(k) for k in st["state"]["key"]],
            "buffer": [int(b) for b in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.stream = int(state["stream"])
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(int(state["seed"]), int(state["stream"]))
        rng.set_state(state)
        return rng


def sample_gaussian(rng: Rng, shape) -> Tensor:
    """I.i.d. standard normal tensor of the given shape."""
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    return Tensor(rng.normal(shape))
