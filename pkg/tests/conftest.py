"""Shared fixtures and generators for the test suite."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qcsm.model import build_scenario


def random_json_value(rng: np.random.Generator, depth: int = 0):
    """Draw one JSON-compatible value, biased toward flat sensor-like docs."""
    roll = rng.random()
    if depth >= 3 or roll < 0.55:
        kind = rng.integers(5)
        if kind == 0:
            return int(rng.integers(-(2**53) + 1, 2**53))
        if kind == 1:
            # Values that survive a JSON round trip exactly.
            return float(np.round(rng.normal() * 1e3, 6))
        if kind == 2:
            size = int(rng.integers(0, 12))
            alphabet = list("abcdefghij klmnopé二\U0001f300")
            return "".join(rng.choice(alphabet) for _ in range(size))
        if kind == 3:
            return bool(rng.integers(2))
        return None
    if roll < 0.8:
        return [random_json_value(rng, depth + 1) for _ in range(rng.integers(0, 5))]
    return {
        f"k{idx}_{rng.integers(100)}": random_json_value(rng, depth + 1)
        for idx in range(rng.integers(0, 5))
    }


def random_json_document(rng: np.random.Generator) -> dict:
    """A top-level object, like every payload the fleet emits."""
    return {
        f"f{idx}": random_json_value(rng, depth=1) for idx in range(rng.integers(1, 6))
    }


@pytest.fixture
def tiny_config():
    """Small, fast 3-service scenario for engine-level tests."""
    return build_scenario(
        ["WindTurbine", "SolarPanel", "Transportation"],
        12,
        seed=7,
        sim_cycles=50,
        episodes=64,
    )


@pytest.fixture
def pair_config():
    """Two-service variant of the tiny scenario."""
    return build_scenario(["WindTurbine", "SolarPanel"], 10, seed=5, sim_cycles=50, episodes=64)
