"""Named random streams derived from a single run seed.

Every stochastic component draws from its own stream so that two runs
sharing a seed see identical churn, traffic and request sequences even
when one of them skips a component entirely (common random numbers).
"""

from __future__ import annotations

import zlib

import numpy as np

# One stream per stochastic concern. Adding a name never perturbs the others.
STREAM_NAMES = ("fleet", "churn", "policy", "traffic", "requests")


def stream_seed(seed: int, name: str) -> np.random.SeedSequence:
    """Seed material for the stream `name` under the run seed `seed`."""
    if name not in STREAM_NAMES:
        raise ValueError(f"unknown stream name: {name!r}")
    return np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("ascii"))])


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the stream `name` under `seed`."""
    return np.random.default_rng(stream_seed(seed, name))


class StreamBundle:
    """All named generators for one run seed, created lazily."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = named_stream(self.seed, name)
        return self._streams[name]

    def __getattr__(self, name: str) -> np.random.Generator:
        if name.startswith("_") or name not in STREAM_NAMES:
            raise AttributeError(name)
        return self.get(name)
