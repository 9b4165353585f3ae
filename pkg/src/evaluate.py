"""
Evaluation
Real-time dispatch per realized scenario, out-of-sample violation statistics,
welfare and DSO-cost accounting, and the analytical sub-optimality gap bounds.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from flexreq import BalanceMode, FlexRequestSet, weighted_sum
from grid import FlowState, Network, PathMatrix, build_path_matrix, lindistflow_solve
from market import Bid, DeterministicResult, Direction, RealTimePrices, StochasticResult, nodal_acceptance
from socp import ConeProgram, LinExpr, SolveError, solve
from uncertainty import ForecastErrorModel, ScenarioSet


logger = logging.getLogger(__name__)

MIN_OUT_OF_SAMPLE = 100
# keeps activation minimal when it is free
ACTIVATION_TIE = 1e-6


class EvaluationError(ValueError):
    """Raised for inconsistent evaluation inputs."""


@dataclass
class ProcuredFlexibility:
    """Up/down capacity per (period, bus) in MW."""

    bus_ids: Tuple[int, ...]
    period_ids: Tuple[int, ...]
    up: np.ndarray
    down: np.ndarray
    provenance: str = "none"

    def __post_init__(self):
        self.up = np.asarray(self.up, dtype=float)
        self.down = np.asarray(self.down, dtype=float)
        shape = (len(self.period_ids), len(self.bus_ids))
        if self.up.shape != shape or self.down.shape != shape:
            raise EvaluationError(f"capacities must have shape {shape}, got {self.up.shape} and {self.down.shape}")
        if (self.up < 0).any() or (self.down < 0).any():
            raise EvaluationError("procured capacities must be nonnegative")
        if self.provenance not in ("deterministic", "stochastic", "none"):
            raise EvaluationError(f"unknown provenance {self.provenance!r}")

    @classmethod
    def none(cls, network: Network) -> "ProcuredFlexibility":
        shape = (network.n_periods, network.n_buses)
        return cls(network.bus_ids, tuple(p.id for p in network.periods), np.zeros(shape), np.zeros(shape), "none")

    @classmethod
    def from_deterministic(cls, result: DeterministicResult, offers: Sequence[Bid], network: Network) -> "ProcuredFlexibility":
        period_ids = tuple(p.id for p in network.periods)
        up, down = nodal_acceptance(offers, result.accepted, network.bus_ids, period_ids)
        return cls(network.bus_ids, period_ids, up, down, "deterministic")

    @classmethod
    def from_stochastic(cls, result: StochasticResult) -> "ProcuredFlexibility":
        return cls(result.bus_ids, result.period_ids, result.procured_up, result.procured_down, "stochastic")

    @property
    def total_up(self) -> float:
        return float(self.up.sum())

    @property
    def total_down(self) -> float:
        return float(self.down.sum())


@dataclass
class DispatchResult:
    """Energy per (period, bus) in MWh; flows per-unit; costs in EUR."""

    activation: np.ndarray
    shedding: np.ndarray
    curtailment: np.ndarray
    flows: List[FlowState]
    costs: Dict[str, float]

    @property
    def total_cost(self) -> float:
        return self.costs["total"]


def _dispatch_program(
    network: Network,
    pm: PathMatrix,
    procured: ProcuredFlexibility,
    realized: np.ndarray,
    xi_tot: np.ndarray,
    prices: RealTimePrices,
    mode: BalanceMode,
):
    a = pm.a
    k = network.k_factors
    base = network.base_mva
    program = ConeProgram("dispatch")
    handles = []
    objective = LinExpr()

    for t, period in enumerate(network.periods):
        tid = period.id
        energy = period.dt_hours * base
        v: Dict[str, List[LinExpr]] = {"a_up": [], "a_down": [], "ns": [], "c": []}
        for n, bus_id in enumerate(network.bus_ids):
            for name in v:
                v[name].append(LinExpr() if n == network.slack_index else program.variable(f"{name}[{bus_id},{tid}]", nonneg=True))
            if n != network.slack_index:
                program.add_le(v["a_up"][n], procured.up[t, n] / base, "activation", f"cap_up[{bus_id},{tid}]")
                program.add_le(v["a_down"][n], procured.down[t, n] / base, "activation", f"cap_down[{bus_id},{tid}]")

        flex = [v["a_up"][n] - v["a_down"][n] + v["ns"][n] - v["c"][n] for n in range(network.n_buses)]
        net = [flex[n] + realized[t, n] for n in range(network.n_buses)]
        p = [-weighted_sum(a[l], net) for l in range(network.n_lines)]
        q = [-weighted_sum(a[l] * k, net) for l in range(network.n_lines)]
        for l, (i, j) in enumerate(network.line_keys):
            program.add_soc(LinExpr(const=network.line_s[l]), [p[l], q[l]], "rating", f"apparent[{i}-{j},{tid}]")
        for n, bus_id in enumerate(network.bus_ids):
            u = network.slack_u0 - weighted_sum(2.0 * a[:, n] * network.line_r, p) - weighted_sum(2.0 * a[:, n] * network.line_x, q)
            program.add_le(u, network.v_max_sq[n], "voltage", f"v_high[{bus_id},{tid}]")
            program.add_le(-u, -network.v_min_sq[n], "voltage", f"v_low[{bus_id},{tid}]")
        if mode is BalanceMode.DSO_RESPONSIBLE:
            program.add_eq(LinExpr.total(flex), xi_tot[t], "balance", f"dso_balance[{tid}]")

        act = LinExpr.total(v["a_up"]) + LinExpr.total(v["a_down"])
        objective = objective + act * (energy * prices.activation + ACTIVATION_TIE)
        objective = objective + LinExpr.total(v["ns"]) * (energy * prices.shedding)
        objective = objective + LinExpr.total(v["c"]) * (energy * prices.curtailment)
        handles.append(v)

    program.minimize(objective)
    return program, handles


def _within_limits(network: Network, state: FlowState, tol: float = 1e-9) -> bool:
    return bool(
        (state.apparent_sq <= network.line_s ** 2 + tol).all()
        and (state.u <= network.v_max_sq + tol).all()
        and (state.u >= network.v_min_sq - tol).all()
    )


def realtime_dispatch(
    network: Network,
    procured: ProcuredFlexibility,
    xi: np.ndarray,
    model: ForecastErrorModel,
    prices: RealTimePrices = RealTimePrices(),
    mode: BalanceMode = BalanceMode.NOT_RESPONSIBLE,
    pathmatrix: Optional[PathMatrix] = None,
    solver_tol: float = 1e-8,
) -> DispatchResult:
    """
    Cheapest activation, shedding and curtailment for one realized error.

    Activation stays within the procured capacities; shedding and curtailment
    are unbounded. In not_responsible mode the slack absorbs the net deviation,
    so an error that leaves flows and voltages within limits costs nothing and
    activates nothing; balancing a load spike with activation or shedding only
    happens in dso_responsible mode, where the DSO's resources must sum to the
    total error.

    Args:
        xi: Realized source errors, shape (T, U) or (U,) for one period, per-unit
    """
    pm = pathmatrix if pathmatrix is not None else build_path_matrix(network)
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if xi.shape != (network.n_periods, model.n_sources):
        raise EvaluationError(f"scenario must have shape ({network.n_periods}, {model.n_sources}), got {xi.shape}")
    if min(prices.activation, prices.shedding, prices.curtailment) < 0:
        raise EvaluationError(f"real-time prices must be nonnegative: {prices}")
    gamma = model.incidence(network)
    realized = np.array([network.injections(t) for t in range(network.n_periods)]) - xi @ gamma.T
    shape = realized.shape

    baseline = [lindistflow_solve(network, realized[t], path_matrix=pm) for t in range(network.n_periods)]
    if mode is BalanceMode.NOT_RESPONSIBLE and all(_within_limits(network, s) for s in baseline):
        zero = np.zeros(shape)
        return DispatchResult(zero, zero.copy(), zero.copy(), baseline, {"activation": 0.0, "shedding": 0.0, "curtailment": 0.0, "total": 0.0})

    program, handles = _dispatch_program(network, pm, procured, realized, xi.sum(axis=1), prices, mode)
    solution = solve(program, tol=solver_tol)
    if not solution.optimal:
        raise SolveError(f"real-time dispatch is {solution.status.value}")

    dt = np.array([p.dt_hours for p in network.periods])[:, None] * network.base_mva
    values = {name: np.array([solution.values(h[name]) for h in handles]) for name in ("a_up", "a_down", "ns", "c")}
    values = {name: np.where(np.abs(arr) < 1e-9, 0.0, arr) for name, arr in values.items()}
    activation_abs = (values["a_up"] + values["a_down"]) * dt
    activation = (values["a_up"] - values["a_down"]) * dt
    shedding = np.maximum(values["ns"], 0.0) * dt
    curtailment = np.maximum(values["c"], 0.0) * dt

    flex = values["a_up"] - values["a_down"] + values["ns"] - values["c"]
    flows = [lindistflow_solve(network, realized[t], flex[t], path_matrix=pm) for t in range(network.n_periods)]
    costs = {
        "activation": float(prices.activation * activation_abs.sum()),
        "shedding": float(prices.shedding * shedding.sum()),
        "curtailment": float(prices.curtailment * curtailment.sum()),
    }
    costs["total"] = sum(costs.values())
    return DispatchResult(activation, shedding, curtailment, flows, costs)


def dispatch_scenarios(
    network: Network,
    procured: ProcuredFlexibility,
    scenarios: ScenarioSet,
    model: ForecastErrorModel,
    prices: RealTimePrices = RealTimePrices(),
    mode: BalanceMode = BalanceMode.NOT_RESPONSIBLE,
    solver_tol: float = 1e-8,
    workers: int = 1,
) -> List[DispatchResult]:
    """Dispatch every scenario; results keep scenario order regardless of workers."""
    pm = build_path_matrix(network)
    draws = scenarios.draws
    if draws.shape[1] == 1 and network.n_periods > 1:
        draws = np.repeat(draws, network.n_periods, axis=1)
    run = partial(realtime_dispatch, network, procured, model=model, prices=prices, mode=mode, pathmatrix=pm, solver_tol=solver_tol)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, draws, chunksize=max(1, len(draws) // (4 * workers))))
    else:
        results = [run(xi) for xi in draws]
    logger.info(
        "Dispatched %d scenarios (%s): mean cost %.2f EUR",
        len(results), procured.provenance, float(np.mean([r.total_cost for r in results])) if results else 0.0,
    )
    return results


# --- out-of-sample ----------------------------------------------------------

@dataclass
class ViolationReport:
    kind: str
    count: int
    frequencies: Dict[str, float]
    per_constraint: Dict[str, Dict[str, float]]

    @property
    def max_frequency(self) -> float:
        return max(self.frequencies.values(), default=0.0)

    @property
    def worst(self) -> Optional[Tuple[str, str]]:
        best = None
        for family, table in sorted(self.per_constraint.items()):
            for location, freq in sorted(table.items()):
                if best is None or freq > best[2]:
                    best = (family, location, freq)
        return (best[0], best[1]) if best else None

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "scenarios": self.count,
            "max_frequency": self.max_frequency,
            "frequencies": dict(sorted(self.frequencies.items())),
            "per_constraint": {f: dict(sorted(t.items())) for f, t in sorted(self.per_constraint.items())},
        }


def _policy(kind: str, solution: Union[FlexRequestSet, StochasticResult], t: int, xi_tot: np.ndarray, base: float):
    """Per-scenario flexibility and its bound checks for one period (per-unit)."""
    xi_tot = xi_tot[:, None]
    if kind == "flexrequest":
        flex = solution.p_r[t] / base + solution.alpha[t] * xi_tot
        checks = {
            "request_up": flex - solution.p_r_up[t] / base,
            "request_down": -flex - solution.p_r_down[t] / base,
        }
        return flex, checks
    if kind == "stochastic":
        act = solution.p_a[t] / base + solution.alpha_a[t] * xi_tot
        ns = solution.p_ns[t] / base + solution.alpha_ns[t] * xi_tot
        cur = solution.p_c[t] / base + solution.alpha_c[t] * xi_tot
        checks = {
            "activation_up": act - solution.procured_up[t] / base,
            "activation_down": -act - solution.procured_down[t] / base,
            "shedding_nonneg": -ns,
            "curtailment_nonneg": -cur,
        }
        return act + ns - cur, checks
    raise EvaluationError(f"unknown solution kind {kind!r}, expected 'flexrequest' or 'stochastic'")


def out_of_sample(
    kind: str,
    solution: Union[FlexRequestSet, StochasticResult],
    network: Network,
    model: ForecastErrorModel,
    scenarios: ScenarioSet,
    pathmatrix: Optional[PathMatrix] = None,
    tol: float = 1e-6,
) -> ViolationReport:
    """
    Empirical violation frequency of every chance constraint under the solved
    affine policies, checked against the original (unreformulated) limits.

    Frequencies are per individual constraint; each family reports its worst one.
    """
    if scenarios.count < MIN_OUT_OF_SAMPLE:
        raise EvaluationError(f"out-of-sample evaluation needs at least {MIN_OUT_OF_SAMPLE} scenarios, got {scenarios.count}")
    pm = pathmatrix if pathmatrix is not None else build_path_matrix(network)
    gamma = model.incidence(network)
    base = network.base_mva
    per: Dict[str, Dict[str, float]] = {}

    def record(family: str, labels: Sequence[str], excess: np.ndarray, tid: int):
        freq = (excess > tol).mean(axis=0)
        table = per.setdefault(family, {})
        for label, f in zip(labels, freq):
            key = f"{label}@{tid}"
            table[key] = max(table.get(key, 0.0), float(f))

    bus_labels = [str(b) for b in network.bus_ids]
    line_labels = [f"{i}-{j}" for i, j in network.line_keys]
    for t, period in enumerate(network.periods):
        xi = scenarios.period(t if scenarios.n_periods > 1 else 0)
        flex, checks = _policy(kind, solution, t, xi.sum(axis=1), base)
        realized = network.injections(t)[None, :] - xi @ gamma.T
        state = lindistflow_solve(network, realized, flex, path_matrix=pm)
        record("rating", line_labels, np.sqrt(state.apparent_sq) - network.line_s, period.id)
        record("voltage_low", bus_labels, network.v_min_sq - state.u, period.id)
        record("voltage_high", bus_labels, state.u - network.v_max_sq, period.id)
        non_slack = [n for n in range(network.n_buses) if n != network.slack_index]
        for family, excess in checks.items():
            record(family, [bus_labels[n] for n in non_slack], excess[:, non_slack], period.id)

    frequencies = {family: max(table.values(), default=0.0) for family, table in per.items()}
    report = ViolationReport(kind, scenarios.count, frequencies, per)
    logger.info("Out-of-sample (%s, %d scenarios): max violation %.4f", kind, scenarios.count, report.max_frequency)
    return report


# --- welfare ----------------------------------------------------------------

@dataclass
class WelfareReport:
    mechanism: str
    scenario_count: int
    procured_up_mw: float
    procured_down_mw: float
    offer_cost: float
    request_payment: float
    shedding_cost: float
    curtailment_cost: float
    activation_cost: float
    liquidity: str = ""

    @property
    def procurement_welfare(self) -> float:
        return self.request_payment - self.offer_cost

    @property
    def realtime_cost(self) -> float:
        return self.shedding_cost + self.curtailment_cost + self.activation_cost

    @property
    def social_welfare(self) -> float:
        return self.procurement_welfare - self.shedding_cost - self.curtailment_cost

    @property
    def dso_cost(self) -> float:
        return self.request_payment + self.realtime_cost

    def to_dict(self) -> Dict:
        return {
            "mechanism": self.mechanism,
            "liquidity": self.liquidity,
            "scenarios": self.scenario_count,
            "procured_up_mw": round(self.procured_up_mw, 10),
            "procured_down_mw": round(self.procured_down_mw, 10),
            "offer_cost_eur": round(self.offer_cost, 8),
            "request_payment_eur": round(self.request_payment, 8),
            "procurement_welfare_eur": round(self.procurement_welfare, 8),
            "shedding_cost_eur": round(self.shedding_cost, 8),
            "curtailment_cost_eur": round(self.curtailment_cost, 8),
            "activation_cost_eur": round(self.activation_cost, 8),
            "realtime_cost_eur": round(self.realtime_cost, 8),
            "social_welfare_eur": round(self.social_welfare, 8),
            "dso_cost_eur": round(self.dso_cost, 8),
        }


def welfare(
    mechanism: str,
    offers: Sequence[Bid],
    accepted: Mapping[str, float],
    dispatches: Sequence[DispatchResult],
    request_prices: Tuple[float, float] = (70.0, 40.0),
    scenario_count: Optional[int] = None,
    liquidity: str = "",
) -> WelfareReport:
    """
    Social welfare and DSO cost of one mechanism.

    The procurement term values accepted offer volume at the request prices
    (pay-as-bid for the DSO, also applied to the stochastic clearing); the
    real-time term averages the dispatch costs over the scenarios.

    Raises:
        EvaluationError: when the dispatch count differs from scenario_count
    """
    if scenario_count is not None and len(dispatches) != scenario_count:
        raise EvaluationError(f"{mechanism}: {len(dispatches)} dispatches for {scenario_count} scenarios")
    volume = {Direction.UP: 0.0, Direction.DOWN: 0.0}
    offer_cost = 0.0
    for bid in offers:
        qty = accepted.get(bid.id, 0.0)
        if qty > 0:
            volume[bid.direction] += qty
            offer_cost += qty * bid.price
    payment = request_prices[0] * volume[Direction.UP] + request_prices[1] * volume[Direction.DOWN]

    def mean(key: str) -> float:
        return float(np.mean([d.costs[key] for d in dispatches])) if dispatches else 0.0

    return WelfareReport(
        mechanism=mechanism,
        scenario_count=len(dispatches),
        procured_up_mw=volume[Direction.UP],
        procured_down_mw=volume[Direction.DOWN],
        offer_cost=offer_cost,
        request_payment=payment,
        shedding_cost=mean("shedding"),
        curtailment_cost=mean("curtailment"),
        activation_cost=mean("activation"),
        liquidity=liquidity,
    )


def check_comparable(reports: Sequence[WelfareReport]):
    counts = {r.scenario_count for r in reports}
    if len(counts) > 1:
        raise EvaluationError(f"welfare reports use different scenario counts {sorted(counts)}")


# --- gap bounds -------------------------------------------------------------

@dataclass(frozen=True)
class GapOffer:
    bus: int
    price: float
    quantity: float


@dataclass
class GapReport:
    l_u: float
    l_sc: float
    l_fr: float
    xi_sc: Optional[float]
    xi_fr: Optional[float]
    xi_fs: Optional[float]
    level: int
    fully_matched: Dict[str, bool] = field(default_factory=dict)

    LEVEL_TEXT = {
        1: "no active network constraints and sufficient liquidity",
        2: "active network constraints and sufficient liquidity per node",
        3: "sufficient liquidity in the network, but insufficient liquidity per node",
        4: "insufficient liquidity in the system",
    }

    @property
    def classification(self) -> str:
        return self.LEVEL_TEXT[self.level]

    def to_dict(self) -> Dict:
        return {
            "L_U": self.l_u, "L_SC": self.l_sc, "L_FR": self.l_fr,
            "Xi_SC": self.xi_sc, "Xi_FR": self.xi_fr, "Xi_FS": self.xi_fs,
            "level": self.level, "classification": self.classification,
            "fully_matched": dict(sorted(self.fully_matched.items())),
        }


def _greedy(items: Sequence[Tuple[float, float]], demand: float, price: float) -> Tuple[float, float]:
    """Fill `demand` with (price, capacity) items cheapest first; returns (welfare, matched)."""
    welfare_sum = matched = 0.0
    for p, cap in sorted(items):
        if matched >= demand:
            break
        take = min(cap, demand - matched)
        welfare_sum += (price - p) * take
        matched += take
    return welfare_sum, matched


def gap_bounds(
    requests: Mapping[int, float],
    offers: Sequence[GapOffer],
    shares: Mapping[int, float],
    price: float,
    tol: float = 1e-9,
) -> GapReport:
    """
    Welfare of the unconstrained (U), share-constrained stochastic (SC) and
    location-based FlexRequest (FR) clearings and the gaps between them.

    Only a share a_n of an offer at bus n counts toward requests, and only
    offers priced at or below `price` take part. Each clearing matches at most
    the requested volume.
    """
    bad = {n: a for n, a in shares.items() if not 0 < a <= 1}
    if bad:
        raise EvaluationError(f"shares must lie in (0, 1], got {bad}")
    eligible = [o for o in offers if o.price <= price and o.quantity > 0]
    total = float(sum(requests.values()))

    l_u, matched_u = _greedy([(o.price, o.quantity) for o in eligible], total, price)
    l_sc, matched_sc = _greedy([(o.price, shares.get(o.bus, 1.0) * o.quantity) for o in eligible], total, price)

    l_fr = 0.0
    fr_full = True
    for bus, demand in sorted(requests.items()):
        local = [(o.price, shares.get(bus, 1.0) * o.quantity) for o in eligible if o.bus == bus]
        w, m = _greedy(local, demand, price)
        l_fr += w
        fr_full &= m >= demand - tol

    def ratio(num: float, den: float) -> Optional[float]:
        return 1.0 - num / den if den > tol else None

    fully = {"U": matched_u >= total - tol, "SC": matched_sc >= total - tol, "FR": fr_full}
    if not fully["U"]:
        level = 4
    elif fr_full and abs(l_fr - l_u) <= tol * max(1.0, abs(l_u)):
        level = 2
    elif all(shares.get(o.bus, 1.0) == 1.0 for o in eligible) and all(shares.get(n, 1.0) == 1.0 for n in requests):
        level = 1
    else:
        level = 3

    return GapReport(
        l_u=l_u,
        l_sc=l_sc,
        l_fr=l_fr,
        xi_sc=ratio(l_sc, l_u),
        xi_fr=ratio(l_fr, l_u),
        xi_fs=ratio(l_fr, l_sc),
        level=level,
        fully_matched=fully,
    )


def load_gap_instance(path: Union[str, Path]) -> Tuple[Dict[int, float], List[GapOffer], Dict[int, float], float]:
    """
    Read a gap-bound instance: {"requests": {bus: MW}, "offers": [{bus, price,
    quantity}], "shares": {bus: a}, "price": EUR/MW}. Missing shares default to 1.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Gap instance not found: {path}")
    try:
        with open(path, "r") as f:
            doc = json.load(f)
        requests = {int(k): float(v) for k, v in doc["requests"].items()}
        offers = [GapOffer(int(o["bus"]), float(o["price"]), float(o["quantity"])) for o in doc["offers"]]
        shares = {int(k): float(v) for k, v in doc.get("shares", {}).items()}
        price = float(doc["price"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise EvaluationError(f"Malformed gap instance {path}: {e}") from e
    return requests, offers, shares, price
