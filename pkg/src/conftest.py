"""Shared fixtures: tiny chain/star feeders and a random radial tree builder."""

import sys
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from grid import Bus, Line, Network, Period, ensure_radial
from uncertainty import ForecastErrorModel, Source


ROOT = Path(__file__).resolve().parent.parent


def make_network(
    p_inj: Sequence[float],
    lines: Sequence[Tuple[int, int]],
    r: float = 0.01,
    x: float = 0.01,
    rating: float = 10.0,
    cos_phi: float = 1.0,
    v_limits: Tuple[float, float] = (0.9, 1.1),
    ratings: Sequence[float] = None,
) -> Network:
    """Per-unit network (base 1 MVA), slack at bus 0, one period of one hour."""
    buses = tuple(
        Bus(id=n, v_min=v_limits[0], v_max=v_limits[1], p_inj=(float(p),), cos_phi=cos_phi, is_slack=(n == 0))
        for n, p in enumerate(p_inj)
    )
    ratings = ratings if ratings is not None else [rating] * len(lines)
    return Network(
        buses=buses,
        lines=tuple(Line(i, j, r, x, float(s)) for (i, j), s in zip(lines, ratings)),
        periods=(Period(0, 1.0),),
    )


def random_tree(n: int, seed: int) -> Network:
    """Random radial network with random impedances and power factors."""
    rng = np.random.default_rng(seed)
    lines = [(int(rng.integers(0, k)), k) for k in range(1, n)]
    buses = tuple(
        Bus(
            id=k,
            v_min=0.9,
            v_max=1.1,
            p_inj=(0.0 if k == 0 else float(rng.uniform(-0.5, 0.5)),),
            cos_phi=float(rng.uniform(0.85, 1.0)),
            is_slack=(k == 0),
        )
        for k in range(n)
    )
    return Network(
        buses=buses,
        lines=tuple(Line(i, j, float(rng.uniform(0.005, 0.02)), float(rng.uniform(0.005, 0.02)), 5.0) for i, j in lines),
    )


def zero_model(bus: int) -> ForecastErrorModel:
    return ForecastErrorModel((Source("W", bus),), np.zeros((1, 1)))


@pytest.fixture
def chain3():
    """Slack 0 - 1 - 2, no load."""
    return ensure_radial(make_network([0.0, 0.0, 0.0], [(0, 1), (1, 2)]))


@pytest.fixture
def overloaded_chain():
    """Bus 2 injects 1.2 p.u. into line (1,2) rated 1.0 p.u.: a 0.2 p.u. overload at unity power factor."""
    return ensure_radial(make_network([0.0, 0.0, 1.2], [(0, 1), (1, 2)], ratings=[5.0, 1.0]))


@pytest.fixture
def star4():
    return ensure_radial(make_network([0.0, -0.1, -0.1, -0.1], [(0, 1), (0, 2), (0, 3)]))


@pytest.fixture
def bundled_paths():
    return ROOT / "data" / "network_15bus.json", ROOT / "data" / "model_15bus.json"


@pytest.fixture
def bundled_network(bundled_paths):
    from grid import load_network

    return ensure_radial(load_network(bundled_paths[0]))
