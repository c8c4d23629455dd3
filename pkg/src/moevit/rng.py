"""Seedable random source with independent named sub-streams.

Every source of randomness in the library (weight init, gate noise, dropout,
patch masking, data order, augmentation) draws from its own stream so that each
one is reproducible on its own: changing how often one stream is consumed never
shifts the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


class RngStreams:
    """A family of numpy generators derived from one seed, keyed by name."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        """Return the generator for `name`, creating it on first use."""
        gen = self._streams.get(name)
        if gen is None:
            # crc32 gives a stable name -> int mapping across runs and versions
            key = zlib.crc32(name.encode("utf-8"))
            gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence((self.seed, key))))
            self._streams[name] = gen
        return gen

    # Shorthands for the streams the library uses.
    @property
    def init(self) -> np.random.Generator:
        return self.stream("init")

    @property
    def gate_noise(self) -> np.random.Generator:
        return self.stream("gate-noise")

    @property
    def dropout(self) -> np.random.Generator:
        return self.stream("dropout")

    @property
    def masking(self) -> np.random.Generator:
        return self.stream("masking")

    @property
    def data_order(self) -> np.random.Generator:
        return self.stream("data-order")

    @property
    def augment(self) -> np.random.Generator:
        return self.stream("augment")

    def state(self) -> dict:
        """Snapshot of the seed and every stream touched so far (JSON-safe)."""
        return {
            "seed": self.seed,
            "streams": {name: _state_to_json(g.bit_generator.state) for name, g in self._streams.items()},
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._streams = {}
        for name, bg_state in state["streams"].items():
            gen = self.stream(name)
            gen.bit_generator.state = _state_from_json(bg_state)


def _state_to_json(state: dict) -> dict:
    # PCG64 state holds 128-bit ints; store them as strings for JSON.
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: str(v) for k, v in state["state"].items()},
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def _state_from_json(blob: dict) -> dict:
    return {
        "bit_generator": blob["bit_generator"],
        "state": {k: int(v) for k, v in blob["state"].items()},
        "has_uint32": blob["has_uint32"],
        "uinteger": blob["uinteger"],
    }
