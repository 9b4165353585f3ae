"""
Flexibility Market
Deterministic zonal clearing of FlexRequests against FlexOffers, zone
construction, and the stochastic chance-constrained benchmark clearing.
"""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd

from flexreq import BalanceMode, ELASTIC_PENALTY, NetworkBlock, add_network_block, solve_or_diagnose
from grid import Network, PathMatrix, build_path_matrix, lindistflow_solve
from socp import ConeProgram, LinExpr, Solution
from uncertainty import EpsilonConfig, ForecastErrorModel, sample_scenarios


logger = logging.getLogger(__name__)


class MarketError(ValueError):
    """Raised for malformed bids, zones or books."""


class Direction(str, Enum):
    UP = "up"
    DOWN = "down"


class BidKind(str, Enum):
    OFFER = "offer"
    REQUEST = "request"


@dataclass(frozen=True)
class Bid:
    id: str
    bus: int
    period: int
    direction: Direction
    kind: BidKind
    quantity: float
    price: float

    def __post_init__(self):
        if not self.quantity >= 0:
            raise MarketError(f"bid {self.id}: quantity must be >= 0, got {self.quantity}")
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "kind", BidKind(self.kind))


LIQUIDITY_LEVELS: Dict[str, Tuple[float, float]] = {
    "high": (1.0, 1.0),
    "medium": (0.6, 0.5),
    "low": (0.3, 0.25),
    "none": (0.0, 0.0),
}


@dataclass(frozen=True)
class ZonePartition:
    zones: Tuple[FrozenSet[int], ...]

    def __post_init__(self):
        zones = tuple(frozenset(int(b) for b in z) for z in self.zones)
        seen = set()
        for z in zones:
            if not z:
                raise MarketError("empty zone")
            overlap = seen & z
            if overlap:
                raise MarketError(f"buses {sorted(overlap)} belong to several zones")
            seen |= z
        object.__setattr__(self, "zones", tuple(sorted(zones, key=min)))

    @classmethod
    def nodal(cls, bus_ids: Iterable[int]) -> "ZonePartition":
        return cls(tuple(frozenset([b]) for b in bus_ids))

    @classmethod
    def single(cls, bus_ids: Iterable[int]) -> "ZonePartition":
        return cls((frozenset(bus_ids),))

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "ZonePartition":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Zone file not found: {path}")
        try:
            with open(path, "r") as f:
                doc = json.load(f)
            return cls(tuple(frozenset(int(b) for b in zone) for zone in doc))
        except (json.JSONDecodeError, TypeError, ValueError) as e:
            if isinstance(e, MarketError):
                raise
            raise MarketError(f"Malformed zone file {path}: {e}") from e

    def to_json(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.as_lists(), f, indent=2)

    def as_lists(self) -> List[List[int]]:
        return [sorted(z) for z in self.zones]

    @property
    def n_zones(self) -> int:
        return len(self.zones)

    @property
    def buses(self) -> FrozenSet[int]:
        return frozenset().union(*self.zones)

    def covers(self, bus_ids: Iterable[int]) -> bool:
        return set(bus_ids) == set(self.buses)

    def zone_of(self, bus: int) -> int:
        for i, z in enumerate(self.zones):
            if bus in z:
                return i
        raise MarketError(f"bus {bus} is not in any zone")

    def merged(self, i: int, j: int) -> "ZonePartition":
        """Coarser partition with zones i and j joined."""
        if i == j:
            return self
        rest = [z for k, z in enumerate(self.zones) if k not in (i, j)]
        return ZonePartition(tuple(rest) + (self.zones[i] | self.zones[j],))


# --- deterministic clearing -------------------------------------------------

@dataclass
class DeterministicResult:
    accepted: Dict[str, float]
    matched: Dict[Tuple[int, int, str], float]
    procurement_cost: float
    offer_cost: float

    @property
    def welfare(self) -> float:
        return self.procurement_cost - self.offer_cost

    @property
    def matched_volume(self) -> float:
        return float(sum(self.matched.values()))

    def to_dict(self) -> Dict:
        return {
            "accepted": {k: round(v, 10) for k, v in sorted(self.accepted.items())},
            "matched": [
                {"zone": z, "period": t, "direction": d, "volume_mw": round(v, 10)}
                for (z, t, d), v in sorted(self.matched.items())
            ],
            "summary": {
                "procurement_cost_eur": round(self.procurement_cost, 8),
                "offer_cost_eur": round(self.offer_cost, 8),
                "welfare_eur": round(self.welfare, 8),
                "matched_volume_mw": round(self.matched_volume, 10),
            },
        }


def _duplicate_ids(bids: Sequence[Bid]) -> List[str]:
    return sorted(k for k, n in Counter(b.id for b in bids).items() if n > 1)


def clear_deterministic(offers: Sequence[Bid], requests: Sequence[Bid], zones: ZonePartition) -> DeterministicResult:
    """
    Merit-order clearing per (zone, period, direction).

    Offers are taken cheapest first and requests highest first, equal prices
    by ascending bid id; pairs are matched while the offer price does not
    exceed the request price. Bids are divisible. Requests pay as bid.

    Raises:
        MarketError: a bid has the wrong kind, its bus is in no zone or its id
            is used twice
    """
    duplicates = _duplicate_ids([*offers, *requests])
    if duplicates:
        raise MarketError(f"bid ids must be unique across offers and requests, repeated: {duplicates}")
    books: Dict[Tuple[int, int, str], Tuple[List[Bid], List[Bid]]] = defaultdict(lambda: ([], []))
    for kind, bids, slot in ((BidKind.OFFER, offers, 0), (BidKind.REQUEST, requests, 1)):
        for bid in bids:
            if bid.kind != kind:
                raise MarketError(f"bid {bid.id} is a {bid.kind.value}, expected {kind.value}")
            books[(zones.zone_of(bid.bus), bid.period, bid.direction.value)][slot].append(bid)

    accepted = {b.id: 0.0 for b in [*offers, *requests]}
    matched: Dict[Tuple[int, int, str], float] = {}
    procurement = offer_cost = 0.0

    for key in sorted(books):
        sells = sorted(books[key][0], key=lambda b: (b.price, b.id))
        buys = sorted(books[key][1], key=lambda b: (-b.price, b.id))
        i = j = 0
        rem_o = sells[0].quantity if sells else 0.0
        rem_r = buys[0].quantity if buys else 0.0
        volume = 0.0
        while i < len(sells) and j < len(buys) and sells[i].price <= buys[j].price:
            qty = min(rem_o, rem_r)
            if qty > 0:
                accepted[sells[i].id] += qty
                accepted[buys[j].id] += qty
                procurement += qty * buys[j].price
                offer_cost += qty * sells[i].price
                volume += qty
            rem_o -= qty
            rem_r -= qty
            if rem_o <= 0:
                i += 1
                rem_o = sells[i].quantity if i < len(sells) else 0.0
            if rem_r <= 0:
                j += 1
                rem_r = buys[j].quantity if j < len(buys) else 0.0
        if volume > 0:
            matched[key] = volume

    logger.info("Deterministic clearing: %.4f MW matched in %d cells", sum(matched.values()), len(matched))
    return DeterministicResult(accepted, matched, procurement, offer_cost)


def nodal_acceptance(bids: Sequence[Bid], accepted: Dict[str, float], bus_ids: Sequence[int], period_ids: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Accepted volumes summed per (period, bus), MW, as (up, down) arrays."""
    up = np.zeros((len(period_ids), len(bus_ids)))
    down = np.zeros_like(up)
    t_pos = {t: i for i, t in enumerate(period_ids)}
    n_pos = {n: i for i, n in enumerate(bus_ids)}
    for bid in bids:
        qty = accepted.get(bid.id, 0.0)
        if qty <= 0 or bid.period not in t_pos or bid.bus not in n_pos:
            continue
        target = up if bid.direction == Direction.UP else down
        target[t_pos[bid.period], n_pos[bid.bus]] += qty
    return up, down


# --- zones ------------------------------------------------------------------

def zones_from_congestion(
    network: Network,
    model: ForecastErrorModel,
    samples: int,
    threshold: float,
    seed: int,
    margin_frac: float = 0.0,
    injections: Optional[np.ndarray] = None,
    pathmatrix: Optional[PathMatrix] = None,
) -> ZonePartition:
    """
    Split the feeder at lines that are often congested.

    A line is risky when, over `samples` sampled errors and without any
    flexibility, P^2 + Q^2 > S^2 (1 - margin_frac) more often than `threshold`
    in some period. Zones are the connected components left after removing
    the risky lines.
    """
    pm = pathmatrix if pathmatrix is not None else build_path_matrix(network)
    draws = sample_scenarios(model, samples, seed, n_periods=network.n_periods)
    gamma = model.incidence(network)
    risky = np.zeros(network.n_lines, dtype=bool)
    for t in range(network.n_periods):
        inj = network.injections(t) if injections is None else np.asarray(injections, dtype=float)[t]
        realized = inj[None, :] - draws.period(t) @ gamma.T
        state = lindistflow_solve(network, realized, path_matrix=pm)
        limit = network.line_s ** 2 * (1.0 - margin_frac)
        freq = (state.apparent_sq > limit).mean(axis=0)
        risky |= freq > threshold

    graph = nx.Graph()
    graph.add_nodes_from(network.bus_ids)
    graph.add_edges_from(key for key, bad in zip(network.line_keys, risky) if not bad)
    zones = ZonePartition(tuple(frozenset(c) for c in nx.connected_components(graph)))
    logger.info("%d risky lines -> %d zones", int(risky.sum()), zones.n_zones)
    return zones


# --- stochastic clearing ----------------------------------------------------

@dataclass(frozen=True)
class RealTimePrices:
    """Activation, load-shedding and curtailment prices in EUR/MWh."""

    activation: float = 0.0
    shedding: float = 200.0
    curtailment: float = 60.0


@dataclass
class _StochVars:
    tid: int
    offer_ids: List[str]
    p_o: List[LinExpr]
    o_up: List[LinExpr]
    o_down: List[LinExpr]
    p_a: List[LinExpr]
    p_ns: List[LinExpr]
    p_c: List[LinExpr]
    alpha_a: List[LinExpr]
    alpha_ns: List[LinExpr]
    alpha_c: List[LinExpr]
    costs: Dict[str, LinExpr]
    block: NetworkBlock


def _build_stochastic(
    network: Network,
    pathmatrix: PathMatrix,
    offers: Sequence[Bid],
    model: ForecastErrorModel,
    epsilons: EpsilonConfig,
    prices: RealTimePrices,
    mode: BalanceMode,
    fixed_procurement: Optional[Tuple[np.ndarray, np.ndarray]],
    elastic: bool,
) -> Tuple[ConeProgram, List[_StochVars]]:
    base = network.base_mva
    z = epsilons.quantiles()
    program = ConeProgram("stochastic" + ("_elastic" if elastic else ""))
    objective = LinExpr()
    handles = []

    for t, period in enumerate(network.periods):
        tid = period.id
        dt = period.dt_hours
        sigma_tot = model.total_std(t)
        zero = LinExpr()
        names = ("o_up", "o_down", "p_a", "p_ns", "p_c", "alpha_a", "alpha_ns", "alpha_c")
        nonneg = {"o_up", "o_down", "p_ns", "p_c"}
        v: Dict[str, List[LinExpr]] = {name: [] for name in names}
        for n, bus_id in enumerate(network.bus_ids):
            for name in names:
                if n == network.slack_index:
                    v[name].append(zero)
                else:
                    v[name].append(program.variable(f"{name}[{bus_id},{tid}]", nonneg=name in nonneg))

        period_offers = sorted((b for b in offers if b.period == tid), key=lambda b: b.id)
        p_o, offer_ids = [], []
        by_bus: Dict[Tuple[int, str], List[LinExpr]] = defaultdict(list)
        for bid in period_offers:
            if bid.bus not in network.index_of:
                raise MarketError(f"offer {bid.id} sits at unknown bus {bid.bus}")
            var = program.variable(f"p_o[{bid.id}]", nonneg=True)
            cap = 0.0 if network.index_of[bid.bus] == network.slack_index else bid.quantity / base
            program.add_le(var, cap, "offer", f"offer_cap[{bid.id}]")
            by_bus[(bid.bus, bid.direction.value)].append(var)
            p_o.append(var)
            offer_ids.append(bid.id)
            objective = objective + var * (bid.price * base)

        for n, bus_id in enumerate(network.bus_ids):
            if n == network.slack_index:
                continue
            for name, direction in (("o_up", "up"), ("o_down", "down")):
                program.add_eq(v[name][n] - LinExpr.total(by_bus[(bus_id, direction)]), 0.0, "offer", f"{name}_sum[{bus_id},{tid}]")
                if fixed_procurement is not None:
                    fixed = fixed_procurement[0 if direction == "up" else 1][t, n] / base
                    program.add_eq(v[name][n], fixed, "fixed", f"{name}_fixed[{bus_id},{tid}]")

            margin = lambda alpha, key: [alpha * (z[key] * sigma_tot)] if sigma_tot > 0 else []
            m_a = margin(v["alpha_a"][n], "activation")
            program.add_soc(v["o_up"][n] - v["p_a"][n], m_a, "activation", f"act_up[{bus_id},{tid}]")
            program.add_soc(v["o_down"][n] + v["p_a"][n], m_a, "activation", f"act_down[{bus_id},{tid}]")
            program.add_soc(v["p_ns"][n], margin(v["alpha_ns"][n], "shedding"), "shedding", f"ns_nonneg[{bus_id},{tid}]")
            program.add_soc(v["p_c"][n], margin(v["alpha_c"][n], "curtailment"), "curtailment", f"c_nonneg[{bus_id},{tid}]")

        alpha = [v["alpha_a"][n] + v["alpha_ns"][n] - v["alpha_c"][n] for n in range(network.n_buses)]
        flex = [v["p_a"][n] + v["p_ns"][n] - v["p_c"][n] for n in range(network.n_buses)]
        program.add_eq(LinExpr.total(alpha), mode.alpha_sum, "balance", f"alpha_sum[{tid}]")
        if mode is BalanceMode.DSO_RESPONSIBLE:
            program.add_eq(LinExpr.total(flex), 0.0, "balance", f"flex_sum[{tid}]")

        inj = network.injections(t)
        nominal = [flex[n] + inj[n] for n in range(network.n_buses)]
        block = add_network_block(program, network, pathmatrix, model, epsilons, t, nominal, alpha, elastic)

        energy = dt * base
        costs = {
            "procurement": LinExpr.total(var * (bid.price * base) for var, bid in zip(p_o, period_offers)),
            "shedding": LinExpr.total(v["p_ns"]) * (energy * prices.shedding),
            "curtailment": LinExpr.total(v["p_c"]) * (energy * prices.curtailment),
            "activation_bound": LinExpr(),
        }
        if prices.activation > 0:
            bound = []
            for n, bus_id in enumerate(network.bus_ids):
                if n == network.slack_index:
                    continue
                s = program.variable(f"act_abs[{bus_id},{tid}]", nonneg=True)
                program.add_soc(s, [v["p_a"][n], v["alpha_a"][n] * sigma_tot], "activation", f"act_cost[{bus_id},{tid}]")
                bound.append(s)
            costs["activation_bound"] = LinExpr.total(bound) * (energy * prices.activation)
        objective = objective + costs["shedding"] + costs["curtailment"] + costs["activation_bound"]
        for _, _, s in block.slacks:
            objective = objective + s * ELASTIC_PENALTY

        handles.append(_StochVars(
            tid, offer_ids, p_o, v["o_up"], v["o_down"], v["p_a"], v["p_ns"], v["p_c"],
            v["alpha_a"], v["alpha_ns"], v["alpha_c"], costs, block,
        ))

    program.minimize(objective)
    return program, handles


def build_stochastic_program(
    network: Network,
    pathmatrix: PathMatrix,
    offers: Sequence[Bid],
    model: ForecastErrorModel,
    epsilons: EpsilonConfig,
    prices: RealTimePrices = RealTimePrices(),
    mode: BalanceMode = BalanceMode.NOT_RESPONSIBLE,
    fixed_procurement: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    elastic: bool = False,
) -> ConeProgram:
    """
    Stochastic clearing program: offer acceptance plus affine activation,
    shedding and curtailment policies under the same chance constraints as
    FlexRequest creation.

    The expected activation cost uses the upper bound
    lambda_A * sqrt(p_A^2 + sigma_tot^2 alpha_A^2) >= lambda_A * E|p_A + alpha_A xi_tot|;
    it is only added when lambda_A > 0.

    Args:
        fixed_procurement: Optional (up, down) arrays of shape (T, N) in MW that
            pin the nodal procured volumes
    """
    program, _ = _build_stochastic(network, pathmatrix, offers, model, epsilons, prices, mode, fixed_procurement, elastic)
    return program


@dataclass
class StochasticResult:
    bus_ids: Tuple[int, ...]
    period_ids: Tuple[int, ...]
    accepted: Dict[str, float]
    procured_up: np.ndarray
    procured_down: np.ndarray
    p_a: np.ndarray
    p_ns: np.ndarray
    p_c: np.ndarray
    alpha_a: np.ndarray
    alpha_ns: np.ndarray
    alpha_c: np.ndarray
    costs: Dict[str, float]
    objective: float
    mode: BalanceMode = BalanceMode.NOT_RESPONSIBLE
    solution: Optional[Solution] = field(default=None, repr=False)

    @property
    def alpha(self) -> np.ndarray:
        """Net nodal participation factors."""
        return self.alpha_a + self.alpha_ns - self.alpha_c

    def to_dict(self) -> Dict:
        def table(arr):
            return {str(t): [round(float(x), 10) for x in row] for t, row in zip(self.period_ids, arr)}

        return {
            "accepted": {k: round(v, 10) for k, v in sorted(self.accepted.items())},
            "buses": list(self.bus_ids),
            "procured_up_mw": table(self.procured_up),
            "procured_down_mw": table(self.procured_down),
            "p_a_mw": table(self.p_a),
            "p_ns_mw": table(self.p_ns),
            "p_c_mw": table(self.p_c),
            "alpha_a": table(self.alpha_a),
            "alpha_ns": table(self.alpha_ns),
            "alpha_c": table(self.alpha_c),
            "costs_eur": {k: round(v, 8) for k, v in self.costs.items()},
            "objective_eur": round(self.objective, 8),
            "mode": self.mode.value,
            "activation_cost": "convex upper bound sqrt(mu^2 + sigma^2)",
        }


def clear_stochastic(
    network: Network,
    pathmatrix: PathMatrix,
    offers: Sequence[Bid],
    model: ForecastErrorModel,
    epsilons: EpsilonConfig,
    prices: RealTimePrices = RealTimePrices(),
    mode: BalanceMode = BalanceMode.NOT_RESPONSIBLE,
    fixed_procurement: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    solver_tol: float = 1e-8,
    on_program: Optional[Callable[[ConeProgram], None]] = None,
) -> StochasticResult:
    """
    Solve the stochastic clearing and extract acceptance, policies and costs.

    Raises:
        InfeasibleError: with the elastic diagnosis when no clearing exists
    """
    captured: Dict[str, List[_StochVars]] = {}

    def build(elastic: bool):
        program, handles = _build_stochastic(network, pathmatrix, offers, model, epsilons, prices, mode, fixed_procurement, elastic)
        if not elastic:
            captured["handles"] = handles
        return program, [(h.tid, h.block) for h in handles]

    solution = solve_or_diagnose(build, solver_tol, "stochastic clearing", on_program)
    handles = captured["handles"]
    base = network.base_mva

    def grid(attr: str, scale: float = base) -> np.ndarray:
        out = np.array([solution.values(getattr(h, attr)) for h in handles]) * scale
        return np.where(np.abs(out) < 1e-7 * max(scale, 1.0), 0.0, out)

    accepted = {}
    for h in handles:
        for bid_id, var in zip(h.offer_ids, h.p_o):
            qty = solution.value(var) * base
            accepted[bid_id] = qty if qty > 1e-7 * base else 0.0
    costs = {key: sum(solution.value(h.costs[key]) for h in handles) for key in ("procurement", "activation_bound", "shedding", "curtailment")}
    costs["total"] = sum(costs.values())

    result = StochasticResult(
        bus_ids=network.bus_ids,
        period_ids=tuple(h.tid for h in handles),
        accepted=accepted,
        procured_up=np.maximum(grid("o_up"), 0.0),
        procured_down=np.maximum(grid("o_down"), 0.0),
        p_a=grid("p_a"),
        p_ns=np.maximum(grid("p_ns"), 0.0),
        p_c=np.maximum(grid("p_c"), 0.0),
        alpha_a=grid("alpha_a", 1.0),
        alpha_ns=grid("alpha_ns", 1.0),
        alpha_c=grid("alpha_c", 1.0),
        costs=costs,
        objective=solution.objective,
        mode=mode,
        solution=solution,
    )
    logger.info(
        "Stochastic clearing: %.4f MW up, %.4f MW down procured, expected cost %.2f EUR",
        result.procured_up.sum(), result.procured_down.sum(), costs["total"],
    )
    return result


# --- bid books --------------------------------------------------------------

def generate_offers(
    network: Network,
    seed: int,
    liquidity: str = "high",
    price_range: Tuple[float, float] = (25.0, 35.0),
    quantity_range: Tuple[float, float] = (0.5, 1.5),
) -> List[Bid]:
    """
    Random offer book: every non-slack bus offers up and down in every period,
    thinned and scaled per liquidity level. Prices are uniform on price_range.
    """
    if liquidity not in LIQUIDITY_LEVELS:
        raise MarketError(f"unknown liquidity level {liquidity!r}, expected one of {sorted(LIQUIDITY_LEVELS)}")
    keep_prob, scale = LIQUIDITY_LEVELS[liquidity]
    rng = np.random.default_rng(seed)
    offers = []
    for period in network.periods:
        for n, bus in enumerate(network.buses):
            if n == network.slack_index:
                continue
            for direction in (Direction.UP, Direction.DOWN):
                price = rng.uniform(*price_range)
                quantity = rng.uniform(*quantity_range)
                keep = rng.random() < keep_prob
                if keep:
                    offers.append(Bid(
                        id=f"o-{period.id}-{bus.id}-{direction.value}",
                        bus=bus.id,
                        period=period.id,
                        direction=direction,
                        kind=BidKind.OFFER,
                        quantity=round(quantity * scale, 6),
                        price=round(price, 4),
                    ))
    return offers


def requests_from_records(records: Sequence[Dict]) -> List[Bid]:
    """Request bids from FlexRequest records."""
    return [
        Bid(
            id=f"r-{r['period']}-{r['bus']}-{r['direction']}",
            bus=int(r["bus"]),
            period=int(r["period"]),
            direction=Direction(r["direction"]),
            kind=BidKind.REQUEST,
            quantity=float(r["quantity_mw"]),
            price=float(r["price_eur_per_mw"]),
        )
        for r in records
    ]


BID_COLUMNS = ["id", "bus", "period", "direction", "kind", "quantity_mw", "price_eur_per_mw"]


def bids_to_frame(bids: Sequence[Bid]) -> pd.DataFrame:
    rows = [[b.id, b.bus, b.period, b.direction.value, b.kind.value, b.quantity, b.price] for b in bids]
    return pd.DataFrame(rows, columns=BID_COLUMNS)


def save_bids(bids: Sequence[Bid], path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bids_to_frame(bids).to_csv(path, index=False, float_format="%.10g")


def load_bids(path: Union[str, Path]) -> List[Bid]:
    """
    Read a bid-book CSV.

    Raises:
        FileNotFoundError: when the file is missing
        MarketError: for missing columns or invalid values
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Bid file not found: {path}")
    df = pd.read_csv(path, dtype={"id": str})
    missing = [c for c in BID_COLUMNS if c not in df.columns]
    if missing:
        raise MarketError(f"{path} lacks columns {missing}")
    try:
        bids = [
            Bid(str(r.id), int(r.bus), int(r.period), Direction(r.direction), BidKind(r.kind), float(r.quantity_mw), float(r.price_eur_per_mw))
            for r in df.itertuples(index=False)
        ]
    except ValueError as e:
        if isinstance(e, MarketError):
            raise
        raise MarketError(f"Malformed bid file {path}: {e}") from e
    duplicates = _duplicate_ids(bids)
    if duplicates:
        raise MarketError(f"{path} repeats bid ids {duplicates}")
    return bids
