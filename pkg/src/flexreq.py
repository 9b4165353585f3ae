"""
FlexRequest Creation
Chance-constrained LinDistFlow SOC-OPF that finds where, and how much, up/down
flexibility the DSO has to request, in either balance-responsibility mode.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from grid import Network, NetworkError, PathMatrix, build_path_matrix, ensure_radial
from socp import ConeProgram, LinExpr, SolveError, SolveStatus, Solution, solve
from uncertainty import EpsilonConfig, ForecastErrorModel, ScenarioSet, UncertaintyError, affine_sensitivities


logger = logging.getLogger(__name__)

ELASTIC_PENALTY = 1e6
TIE_BREAK_WEIGHT = 1e-6
# values below this (per-unit) are solver noise
ZERO_TOL = 1e-7


class BalanceMode(str, Enum):
    DSO_RESPONSIBLE = "dso_responsible"
    NOT_RESPONSIBLE = "not_responsible"

    @property
    def alpha_sum(self) -> float:
        return 1.0 if self is BalanceMode.DSO_RESPONSIBLE else 0.0


@dataclass(frozen=True)
class ElasticViolation:
    family: str
    location: str
    period: int
    amount: float


@dataclass
class InfeasibilityDiagnosis:
    """Outcome of the penalty-elastic re-solve of an infeasible program."""

    violations: List[ElasticViolation]
    status: str = "diagnosed"

    @property
    def family(self) -> Optional[str]:
        """Constraint family with the largest total elastic slack."""
        if not self.violations:
            return None
        totals: Dict[str, float] = {}
        for v in self.violations:
            totals[v.family] = totals.get(v.family, 0.0) + v.amount
        return max(sorted(totals), key=totals.get)

    @property
    def worst(self) -> Optional[ElasticViolation]:
        return max(self.violations, key=lambda v: v.amount) if self.violations else None

    def __str__(self) -> str:
        if not self.violations:
            return f"no binding location found ({self.status})"
        w = self.worst
        return (
            f"{len(self.violations)} relaxed constraints, mostly {self.family}; "
            f"worst {w.family} at {w.location} (period {w.period}) by {w.amount:.4g} p.u."
        )

    def to_dict(self) -> Dict:
        return {
            "status": self.status,
            "family": self.family,
            "violations": [
                {"family": v.family, "location": v.location, "period": v.period, "amount_pu": v.amount}
                for v in self.violations
            ],
        }


class InfeasibleError(SolveError):
    """No feasible point exists; carries the elastic diagnosis."""

    def __init__(self, message: str, diagnosis: InfeasibilityDiagnosis):
        super().__init__(f"{message}: {diagnosis}")
        self.diagnosis = diagnosis


# --- shared chance-constrained network block ---------------------------------

@dataclass
class NetworkBlock:
    """Flow/voltage variables of one period plus the elastic slacks added for them."""

    p: List[LinExpr]
    q: List[LinExpr]
    u: List[LinExpr]
    k_p: List[LinExpr]
    k_q: List[LinExpr]
    slacks: List[Tuple[str, str, LinExpr]] = field(default_factory=list)


def weighted_sum(weights: np.ndarray, exprs: Sequence[LinExpr]) -> LinExpr:
    out = LinExpr()
    for w, e in zip(weights, exprs):
        if w != 0.0:
            out._iadd(e, float(w))
    return out


def margin_vector(z: float, base_row: np.ndarray, alpha_term: LinExpr, ones_l: np.ndarray) -> List[LinExpr]:
    """
    z * L' b(alpha) for b(alpha) = base_row - (coef . alpha) 1, given base_row
    already multiplied by L and ones_l = 1' L. Identically zero entries are dropped.
    """
    vec = []
    for b, o in zip(base_row, ones_l):
        entry = LinExpr(const=z * b) if o == 0.0 else (LinExpr(const=b) - alpha_term * o) * z
        if entry.terms or entry.const != 0.0:
            vec.append(entry)
    return vec


def add_network_block(
    program: ConeProgram,
    network: Network,
    pathmatrix: PathMatrix,
    model: ForecastErrorModel,
    epsilons: EpsilonConfig,
    period: int,
    nominal: Sequence[LinExpr],
    alpha: Sequence[LinExpr],
    elastic: bool = False,
) -> NetworkBlock:
    """
    Add LinDistFlow equations and the reformulated voltage and rating chance
    constraints of one period.

    Args:
        nominal: Per-bus nominal net injection (forecast plus flexibility), per-unit
        alpha: Per-bus net participation factor of the affine policy
        elastic: Add penalized nonnegative slacks to voltage and rating rows
    """
    tid = network.periods[period].id
    a = pathmatrix.a
    k = network.k_factors
    z = epsilons.quantiles()
    aff = affine_sensitivities(network, pathmatrix, model)
    factor = model.factor(period)
    ones_l = factor.sum(axis=0) if model.n_sources else np.zeros(0)
    base = {name: aff[name].base @ factor for name in ("p", "q", "u")}

    p = [program.variable(f"P[{i}-{j},{tid}]") for i, j in network.line_keys]
    q = [program.variable(f"Q[{i}-{j},{tid}]") for i, j in network.line_keys]
    u = [program.variable(f"u[{n},{tid}]") for n in network.bus_ids]
    k_p = [program.variable(f"kP[{i}-{j},{tid}]") for i, j in network.line_keys]
    k_q = [program.variable(f"kQ[{i}-{j},{tid}]") for i, j in network.line_keys]
    block = NetworkBlock(p, q, u, k_p, k_q)

    def slack(family: str, location: str) -> LinExpr:
        if not elastic:
            return LinExpr()
        s = program.variable(f"slack_{family}[{location},{tid}]", nonneg=True)
        block.slacks.append((family, location, s))
        return s

    for l, (i, j) in enumerate(network.line_keys):
        loc = f"{i}-{j}"
        program.add_eq(p[l] + weighted_sum(a[l], nominal), 0.0, "flow", f"P_balance[{loc},{tid}]")
        program.add_eq(q[l] + weighted_sum(a[l] * k, nominal), 0.0, "flow", f"Q_balance[{loc},{tid}]")
    for n, bus_id in enumerate(network.bus_ids):
        drop = weighted_sum(2.0 * a[:, n] * network.line_r, p) + weighted_sum(2.0 * a[:, n] * network.line_x, q)
        program.add_eq(u[n] + drop, network.slack_u0, "voltage_drop", f"u_drop[{bus_id},{tid}]")

    coef_alpha = {name: [weighted_sum(aff[name].coef[r], alpha) for r in range(aff[name].coef.shape[0])] for name in ("p", "q", "u")}

    for l, (i, j) in enumerate(network.line_keys):
        loc = f"{i}-{j}"
        for name, flow, aux, zr, za in (
            ("p", p, k_p, z["rating_p"], z["aux_p"]),
            ("q", q, k_q, z["rating_q"], z["aux_q"]),
        ):
            m_rating = margin_vector(zr, base[name][l], coef_alpha[name][l], ones_l)
            m_aux = margin_vector(za, base[name][l], coef_alpha[name][l], ones_l)
            s = slack(f"rating_{name}", loc)
            program.add_soc(aux[l] - flow[l] + s, m_rating, "rating", f"{name}_upper[{loc},{tid}]")
            program.add_soc(aux[l] + flow[l] + s, m_rating, "rating", f"{name}_lower[{loc},{tid}]")
            program.add_soc(aux[l], m_aux, "rating", f"k{name.upper()}_margin[{loc},{tid}]")
        s = slack("rating", loc)
        program.add_soc(LinExpr(const=network.line_s[l]) + s, [k_p[l], k_q[l]], "rating", f"apparent[{loc},{tid}]")

    for n, bus_id in enumerate(network.bus_ids):
        m_u = margin_vector(z["voltage"], base["u"][n], coef_alpha["u"][n], ones_l)
        s_hi = slack("voltage_high", str(bus_id))
        s_lo = slack("voltage_low", str(bus_id))
        program.add_soc(network.v_max_sq[n] - u[n] + s_hi, m_u, "voltage", f"v_high[{bus_id},{tid}]")
        program.add_soc(u[n] - network.v_min_sq[n] + s_lo, m_u, "voltage", f"v_low[{bus_id},{tid}]")

    return block


def elastic_diagnosis(solution: Solution, blocks: Sequence[Tuple[int, NetworkBlock]]) -> InfeasibilityDiagnosis:
    if not solution.optimal:
        return InfeasibilityDiagnosis([], status=f"elastic re-solve {solution.status.value}")
    found = []
    for period_id, block in blocks:
        for family, location, expr in block.slacks:
            amount = solution.value(expr)
            if amount > 1e-6:
                found.append(ElasticViolation(family, location, period_id, amount))
    found.sort(key=lambda v: (-v.amount, v.family, v.location))
    return InfeasibilityDiagnosis(found)


# --- FlexRequest problem -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class FlexRequestProblem:
    network: Network
    pathmatrix: PathMatrix
    model: ForecastErrorModel
    epsilons: EpsilonConfig = EpsilonConfig()
    mode: BalanceMode = BalanceMode.NOT_RESPONSIBLE
    periods: Optional[Tuple[int, ...]] = None
    tie_break: bool = False

    def __post_init__(self):
        net = self.network
        if self.pathmatrix.a.shape != (net.n_lines, net.n_buses):
            raise NetworkError(f"path matrix {self.pathmatrix.a.shape} does not match {net.n_lines} lines x {net.n_buses} buses")
        if self.model.sigma.shape[0] not in (1, net.n_periods):
            raise UncertaintyError(f"error model has {self.model.sigma.shape[0]} periods, network has {net.n_periods}")
        if not isinstance(self.epsilons, EpsilonConfig):
            raise UncertaintyError("epsilons must be an EpsilonConfig")
        self.model.incidence(net)
        bad = [t for t in self.period_positions if not 0 <= t < net.n_periods]
        if bad:
            raise NetworkError(f"period positions {bad} outside the {net.n_periods} network periods")

    @classmethod
    def create(cls, network: Network, model: ForecastErrorModel, **kwargs) -> "FlexRequestProblem":
        oriented = ensure_radial(network)
        return cls(oriented, build_path_matrix(oriented), model, **kwargs)

    @property
    def period_positions(self) -> Tuple[int, ...]:
        return self.periods if self.periods is not None else tuple(range(self.network.n_periods))


@dataclass
class _FlexVars:
    up: List[LinExpr]
    down: List[LinExpr]
    p_r: List[LinExpr]
    alpha: List[LinExpr]
    block: NetworkBlock


def _flex_variables(program: ConeProgram, network: Network, tid: int) -> Tuple[List[LinExpr], ...]:
    up, down, p_r, alpha = [], [], [], []
    for n, bus_id in enumerate(network.bus_ids):
        if n == network.slack_index:
            for lst in (up, down, p_r, alpha):
                lst.append(LinExpr())
            continue
        up.append(program.variable(f"p_r_up[{bus_id},{tid}]", nonneg=True))
        down.append(program.variable(f"p_r_down[{bus_id},{tid}]", nonneg=True))
        p_r.append(program.variable(f"p_r[{bus_id},{tid}]"))
        alpha.append(program.variable(f"alpha[{bus_id},{tid}]"))
    return up, down, p_r, alpha


def _build(problem: FlexRequestProblem, elastic: bool) -> Tuple[ConeProgram, Dict[int, _FlexVars]]:
    network = problem.network
    z = problem.epsilons.quantiles()
    depth = problem.pathmatrix.depth()
    program = ConeProgram("flexreq" + ("_elastic" if elastic else ""))
    handles: Dict[int, _FlexVars] = {}
    objective = LinExpr()

    for t in problem.period_positions:
        tid = network.periods[t].id
        up, down, p_r, alpha = _flex_variables(program, network, tid)
        inj = network.injections(t)
        nominal = [p_r[n] + inj[n] for n in range(network.n_buses)]
        block = add_network_block(program, network, problem.pathmatrix, problem.model, problem.epsilons, t, nominal, alpha, elastic)

        program.add_eq(LinExpr.total(alpha), problem.mode.alpha_sum, "balance", f"alpha_sum[{tid}]")
        if problem.mode is BalanceMode.DSO_RESPONSIBLE:
            program.add_eq(LinExpr.total(p_r), 0.0, "balance", f"request_sum[{tid}]")

        sigma_tot = problem.model.total_std(t)
        for n, bus_id in enumerate(network.bus_ids):
            if n == network.slack_index:
                continue
            margin = [alpha[n] * (z["request"] * sigma_tot)] if sigma_tot > 0 else []
            program.add_soc(up[n] - p_r[n], margin, "request", f"request_up[{bus_id},{tid}]")
            program.add_soc(down[n] + p_r[n], margin, "request", f"request_down[{bus_id},{tid}]")
            weight = 1.0 + (TIE_BREAK_WEIGHT * depth[n] if problem.tie_break else 0.0)
            objective = objective + (up[n] + down[n]) * weight

        for _, _, s in block.slacks:
            objective = objective + s * ELASTIC_PENALTY
        handles[t] = _FlexVars(up, down, p_r, alpha, block)

    program.minimize(objective)
    return program, handles


def build_flexreq_program(problem: FlexRequestProblem, elastic: bool = False) -> ConeProgram:
    """
    Chance-constrained FlexRequest-creation program over the problem's periods.

    Margins are second-order cones in the participation factors, so alpha stays
    a decision variable. With elastic=True voltage and rating rows get slacks
    penalized at 1e6 per unit.
    """
    program, _ = _build(problem, elastic)
    return program


@dataclass
class FlexRequestSet:
    """Per-bus, per-period requests in MW, the policy alpha and DSO reservation prices."""

    bus_ids: Tuple[int, ...]
    period_ids: Tuple[int, ...]
    p_r_up: np.ndarray
    p_r_down: np.ndarray
    alpha: np.ndarray
    p_r: np.ndarray
    lambda_r_up: float = 70.0
    lambda_r_down: float = 40.0
    mode: BalanceMode = BalanceMode.NOT_RESPONSIBLE
    method: str = "chance_constrained"
    objective: float = 0.0

    @property
    def total_up(self) -> float:
        return float(self.p_r_up.sum())

    @property
    def total_down(self) -> float:
        return float(self.p_r_down.sum())

    @property
    def total(self) -> float:
        return self.total_up + self.total_down

    @property
    def is_empty(self) -> bool:
        return self.total <= 1e-6

    def to_records(self, min_quantity: float = 1e-6) -> List[Dict]:
        """Bid-book records, one per nonzero (bus, period, direction)."""
        records = []
        for ti, tid in enumerate(self.period_ids):
            for ni, bus in enumerate(self.bus_ids):
                for direction, qty, price in (
                    ("up", self.p_r_up[ti, ni], self.lambda_r_up),
                    ("down", self.p_r_down[ti, ni], self.lambda_r_down),
                ):
                    if qty > min_quantity:
                        records.append({
                            "bus": int(bus),
                            "period": int(tid),
                            "direction": direction,
                            "quantity_mw": round(float(qty), 10),
                            "price_eur_per_mw": float(price),
                            "alpha": round(float(self.alpha[ti, ni]), 10),
                        })
        return records


def _extract(problem: FlexRequestProblem, solution: Solution, handles: Dict[int, _FlexVars], prices) -> FlexRequestSet:
    network = problem.network
    base = network.base_mva
    shape = (len(handles), network.n_buses)
    up, down, alpha, p_r = (np.zeros(shape) for _ in range(4))
    for row, (t, h) in enumerate(sorted(handles.items())):
        up[row] = solution.values(h.up)
        down[row] = solution.values(h.down)
        alpha[row] = solution.values(h.alpha)
        p_r[row] = solution.values(h.p_r)
    clean = lambda arr: np.where(np.abs(arr) < ZERO_TOL, 0.0, arr)
    return FlexRequestSet(
        bus_ids=network.bus_ids,
        period_ids=tuple(network.periods[t].id for t in sorted(handles)),
        p_r_up=np.maximum(clean(up), 0.0) * base,
        p_r_down=np.maximum(clean(down), 0.0) * base,
        alpha=clean(alpha),
        p_r=clean(p_r) * base,
        lambda_r_up=float(prices[0]),
        lambda_r_down=float(prices[1]),
        mode=problem.mode,
        objective=solution.objective,
    )


def solve_or_diagnose(
    build: Callable[[bool], Tuple[ConeProgram, Sequence[Tuple[int, NetworkBlock]]]],
    solver_tol: float,
    what: str,
    on_program: Optional[Callable[[ConeProgram], None]] = None,
) -> Solution:
    """Solve a program; on infeasibility re-solve its elastic twin and raise with the diagnosis."""
    program, _ = build(False)
    if on_program:
        on_program(program)
    solution = solve(program, tol=solver_tol)
    if solution.optimal:
        return solution
    if solution.status == SolveStatus.NUMERICAL_FAILURE:
        raise SolveError(f"{what}: solver reported numerical failure ({solution.residuals})")

    logger.warning("%s is %s, re-solving with elastic slacks", what, solution.status.value)
    elastic, blocks = build(True)
    diagnosis = elastic_diagnosis(solve(elastic, tol=solver_tol), blocks)
    raise InfeasibleError(f"{what} is {solution.status.value}", diagnosis)


def create_flexrequests(
    problem: FlexRequestProblem,
    prices: Tuple[float, float] = (70.0, 40.0),
    solver_tol: float = 1e-8,
    on_program: Optional[Callable[[ConeProgram], None]] = None,
) -> FlexRequestSet:
    """
    Solve the creation program period by period and extract the request set.

    Args:
        problem: Network, error model, epsilons and balance mode
        prices: (up, down) reservation prices in EUR/MW, passed through
        solver_tol: Interior-point tolerance
        on_program: Callback receiving every nominal program (program dumps)

    Raises:
        InfeasibleError: no request can make a period feasible
    """
    parts = []
    for t in problem.period_positions:
        single = replace(problem, periods=(t,))
        tid = problem.network.periods[t].id

        captured: Dict[str, Dict[int, _FlexVars]] = {}

        def build(elastic: bool, single=single, tid=tid, captured=captured):
            program, handles = _build(single, elastic)
            program.name = f"{program.name}_t{tid}"
            if not elastic:
                captured["handles"] = handles
            return program, [(tid, h.block) for h in handles.values()]

        solution = solve_or_diagnose(build, solver_tol, f"FlexRequest program of period {tid}", on_program)
        parts.append(_extract(single, solution, captured["handles"], prices))
        logger.info(
            "Period %d: %.4f MW up, %.4f MW down requested",
            tid, parts[-1].total_up, parts[-1].total_down,
        )

    return _stack(parts)


def _stack(parts: Sequence[FlexRequestSet]) -> FlexRequestSet:
    first = parts[0]
    return replace(
        first,
        period_ids=tuple(pid for p in parts for pid in p.period_ids),
        p_r_up=np.vstack([p.p_r_up for p in parts]),
        p_r_down=np.vstack([p.p_r_down for p in parts]),
        alpha=np.vstack([p.alpha for p in parts]),
        p_r=np.vstack([p.p_r for p in parts]),
        objective=sum(p.objective for p in parts),
    )


def create_flexrequests_sampled(
    problem: FlexRequestProblem,
    scenarios: ScenarioSet,
    prices: Tuple[float, float] = (70.0, 40.0),
    solver_tol: float = 1e-8,
) -> FlexRequestSet:
    """
    Scenario-based variant: requests must cover a recourse activation that keeps
    every sampled scenario within voltage and rating limits.

    The result carries alpha = 0 and P^R = 0 and method "sampled".
    """
    network, pm = problem.network, problem.pathmatrix
    a = pm.a
    k = network.k_factors
    gamma = problem.model.incidence(network)
    parts = []

    for t in problem.period_positions:
        tid = network.periods[t].id
        if scenarios.n_periods not in (1, network.n_periods):
            raise UncertaintyError(f"scenario set has {scenarios.n_periods} periods, network has {network.n_periods}")
        draws = scenarios.period(t if scenarios.n_periods > 1 else 0)
        program = ConeProgram(f"flexreq_sampled_t{tid}")
        up, down, _, _ = _flex_variables(program, network, tid)
        inj = network.injections(t)

        for w, xi in enumerate(draws):
            realized = inj - gamma @ xi
            e = []
            for n, bus_id in enumerate(network.bus_ids):
                if n == network.slack_index:
                    e.append(LinExpr())
                    continue
                var = program.variable(f"e[{bus_id},{tid},{w}]")
                program.add_le(var - up[n], 0.0, "request", f"e_up[{bus_id},{tid},{w}]")
                program.add_le(-var - down[n], 0.0, "request", f"e_down[{bus_id},{tid},{w}]")
                e.append(var)
            net = [e[n] + realized[n] for n in range(network.n_buses)]
            p = [-weighted_sum(a[l], net) for l in range(network.n_lines)]
            q = [-weighted_sum(a[l] * k, net) for l in range(network.n_lines)]
            for l, (i, j) in enumerate(network.line_keys):
                s_bar = network.line_s[l]
                for name, flow in (("P", p[l]), ("Q", q[l])):
                    program.add_le(flow, s_bar, "rating", f"{name}_max[{i}-{j},{tid},{w}]")
                    program.add_le(-flow, s_bar, "rating", f"{name}_min[{i}-{j},{tid},{w}]")
                program.add_soc(LinExpr(const=s_bar), [p[l], q[l]], "rating", f"apparent[{i}-{j},{tid},{w}]")
            for n, bus_id in enumerate(network.bus_ids):
                u = network.slack_u0 - weighted_sum(2.0 * a[:, n] * network.line_r, p) - weighted_sum(2.0 * a[:, n] * network.line_x, q)
                program.add_le(u, network.v_max_sq[n], "voltage", f"v_high[{bus_id},{tid},{w}]")
                program.add_le(-u, -network.v_min_sq[n], "voltage", f"v_low[{bus_id},{tid},{w}]")

        program.minimize(LinExpr.total(up) + LinExpr.total(down))
        solution = solve(program, tol=solver_tol)
        if solution.status == SolveStatus.NUMERICAL_FAILURE:
            raise SolveError(f"sampled FlexRequest program of period {tid}: numerical failure")
        if not solution.optimal:
            raise InfeasibleError(
                f"sampled FlexRequest program of period {tid} is {solution.status.value}",
                InfeasibilityDiagnosis([], status="no elastic diagnosis for the sampled variant"),
            )

        zeros = [LinExpr() for _ in network.bus_ids]
        handles = {t: _FlexVars(up, down, zeros, zeros, NetworkBlock([], [], [], [], []))}
        part = _extract(replace(problem, periods=(t,)), solution, handles, prices)
        parts.append(replace(part, method="sampled"))
        logger.info("Period %d (sampled, %d scenarios): %.4f MW requested", tid, len(draws), part.total)

    return _stack(parts)


def price_discovery(c_inv: float, c_noinv: float, p_flex: float) -> float:
    """
    Reservation price from avoided long-term cost: (C_inv - C_noinv) / P_flex.

    Raises:
        ValueError: if p_flex <= 0
    """
    if p_flex <= 0:
        raise ValueError(f"p_flex must be positive, got {p_flex}")
    price = (c_inv - c_noinv) / p_flex
    if price < 0:
        logger.warning("Discovered price %.4g is negative: flexibility is not valuable here", price)
    return price


# --- file formats -----------------------------------------------------------

def save_flexrequests(requests: FlexRequestSet, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(requests.to_records(), f, indent=2, sort_keys=True)


def load_request_records(path: Union[str, Path]) -> List[Dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Request file not found: {path}")
    with open(path, "r") as f:
        records = json.load(f)
    required = {"bus", "period", "direction", "quantity_mw", "price_eur_per_mw"}
    for i, r in enumerate(records):
        missing = required - set(r)
        if missing:
            raise ValueError(f"{path}: record {i} lacks {sorted(missing)}")
    return records
