"""
Synthetic Datasets
Seeded generators for radial feeders, forecast-error models, scenario files
and offer books. Same arguments and seed, same files.
"""

import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from grid import Bus, Line, Network, Period, lindistflow_solve, save_network, validate_radial
from market import Bid, generate_offers, save_bids
from uncertainty import EpsilonConfig, ForecastErrorModel, Source, sample_scenarios, save_error_model, save_scenarios


logger = logging.getLogger(__name__)

MIN_RATING = 0.3
WIND_CORRELATION = 0.5
WIND_STD_SHARE = 0.15


def _feeder_parents(buses: int, rng: np.random.Generator) -> List[int]:
    """Parent of every non-slack bus, drawn among the last few buses so the tree stays feeder-like."""
    return [int(rng.integers(max(0, n - 3), n)) for n in range(1, buses)]


def generate_network(
    buses: int = 15,
    seed: int = 7,
    periods: int = 1,
    wind_buses: int = 2,
    cos_phi: float = 0.95,
) -> Network:
    """
    Random radial feeder with loads everywhere and wind at a few leaves.

    Ratings are the base-case apparent flow times a random headroom in
    [1.1, 1.8], so uncertainty is what pushes lines toward their limits.
    """
    if buses < 2:
        raise ValueError(f"a feeder needs at least 2 buses, got {buses}")
    if periods < 1:
        raise ValueError(f"periods must be >= 1, got {periods}")

    rng = np.random.default_rng(seed)
    parents = _feeder_parents(buses, rng)
    r = rng.uniform(0.005, 0.015, size=buses - 1)
    x = r * rng.uniform(0.8, 1.5, size=buses - 1)

    inj = -rng.uniform(0.1, 0.4, size=(buses, periods))
    inj[0] = 0.0
    leaves = sorted(set(range(1, buses)) - set(parents))
    wind = sorted(int(b) for b in rng.choice(leaves, size=min(wind_buses, len(leaves)), replace=False))
    for b in wind:
        inj[b] = rng.uniform(0.8, 1.4) * rng.uniform(0.7, 1.0, size=periods)
    inj = inj.round(6)

    draft = Network(
        buses=tuple(
            Bus(id=n, v_min=0.9, v_max=1.1, p_inj=tuple(inj[n]), cos_phi=cos_phi, is_slack=(n == 0))
            for n in range(buses)
        ),
        lines=tuple(
            Line(from_bus=p, to_bus=c, r=round(float(r[c - 1]), 6), x=round(float(x[c - 1]), 6), s_rating=1.0)
            for c, p in enumerate(parents, start=1)
        ),
        periods=tuple(Period(t, 1.0) for t in range(periods)),
    )
    state = lindistflow_solve(draft, inj.T)
    peak = np.sqrt(state.apparent_sq.max(axis=0))
    headroom = rng.uniform(1.1, 1.8, size=buses - 1)
    ratings = np.maximum(peak * headroom, MIN_RATING).round(4)

    network = Network(
        buses=draft.buses,
        lines=tuple(Line(ln.from_bus, ln.to_bus, ln.r, ln.x, float(s)) for ln, s in zip(draft.lines, ratings)),
        periods=draft.periods,
    )
    u = state.u
    if (u < network.v_min_sq - 1e-9).any() or (u > network.v_max_sq + 1e-9).any():
        logger.warning("Generated feeder (seed %d) violates voltage limits in its base case", seed)
    logger.info("Generated %d-bus feeder with wind at buses %s", buses, wind)
    return network


def wind_buses_of(network: Network) -> List[int]:
    """Buses with a positive forecast injection in some period."""
    return [b.id for b in network.buses if not b.is_slack and max(b.p_inj) > 0]


def generate_error_model(
    network: Network,
    std_share: float = WIND_STD_SHARE,
    correlation: float = WIND_CORRELATION,
) -> ForecastErrorModel:
    """
    One error source per wind bus, standard deviation std_share times the
    mean forecast and a common pairwise correlation.
    """
    if not -1.0 < correlation < 1.0:
        raise ValueError(f"correlation must lie in (-1, 1), got {correlation}")
    buses = wind_buses_of(network)
    if not buses:
        raise ValueError("network has no positive injections to attach error sources to")
    index = network.index_of
    std = np.array([std_share * np.mean(network.buses[index[b]].p_inj) for b in buses])
    corr = np.full((len(buses), len(buses)), correlation)
    np.fill_diagonal(corr, 1.0)
    sources = tuple(Source(id=f"W{k + 1}", bus=b) for k, b in enumerate(buses))
    return ForecastErrorModel(sources, (np.outer(std, std) * corr).round(10))


def gen_network(out_dir: Union[str, Path], buses: int, seed: int, periods: int = 1, epsilons: EpsilonConfig = EpsilonConfig()) -> Tuple[Path, Path]:
    """Write network.json and model.json for a generated feeder."""
    out = Path(out_dir)
    network = generate_network(buses=buses, seed=seed, periods=periods)
    report = validate_radial(network)
    if not report.accepted:
        raise ValueError(f"generated network is not radial: {report}")
    model = generate_error_model(network)
    network_path, model_path = out / "network.json", out / "model.json"
    save_network(network, network_path)
    save_error_model(model, epsilons, model_path, base_mva=network.base_mva)
    return network_path, model_path


def gen_scenarios(model: ForecastErrorModel, out_path: Union[str, Path], count: int, seed: int, periods: int = 1, base_mva: float = 1.0) -> Path:
    scenarios = sample_scenarios(model, count, seed, n_periods=periods)
    save_scenarios(scenarios, out_path, base_mva=base_mva)
    return Path(out_path)


def gen_bids(
    network: Network,
    out_path: Union[str, Path],
    seed: int,
    liquidity: str,
    price_range: Sequence[float] = (25.0, 35.0),
    quantity_range: Sequence[float] = (0.5, 1.5),
) -> List[Bid]:
    offers = generate_offers(network, seed, liquidity, tuple(price_range), tuple(quantity_range))
    save_bids(offers, out_path)
    return offers
