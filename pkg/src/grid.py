"""
Radial Grid Model
Bus and line data, radial validation, path matrix and LinDistFlow evaluation.

Everything inside this module is per-unit. MW/MVA values only appear in the
file loaders and writers at the bottom.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd


logger = logging.getLogger(__name__)


class NetworkError(ValueError):
    """Raised when a network is malformed or not radial."""


@dataclass(frozen=True)
class Bus:
    """A network node. Injections are generation-positive, one per period."""

    id: int
    v_min: float
    v_max: float
    p_inj: Tuple[float, ...]
    cos_phi: float = 1.0
    is_slack: bool = False


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float
    s_rating: float

    @property
    def key(self) -> Tuple[int, int]:
        return (self.from_bus, self.to_bus)

    def flipped(self) -> "Line":
        return replace(self, from_bus=self.to_bus, to_bus=self.from_bus)


@dataclass(frozen=True)
class Period:
    id: int
    dt_hours: float = 1.0


@dataclass(frozen=True)
class Network:
    """
    Radial distribution network.

    Lines keep their input order; after `ensure_radial` they are also
    oriented slack -> leaf, which is what the path matrix and the voltage
    sweep rely on.
    """

    buses: Tuple[Bus, ...]
    lines: Tuple[Line, ...]
    base_mva: float = 1.0
    base_kv: float = 1.0
    periods: Tuple[Period, ...] = (Period(0, 1.0),)
    slack_u0: float = 1.0

    @cached_property
    def bus_ids(self) -> Tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    @cached_property
    def index_of(self) -> Dict[int, int]:
        return {bus_id: i for i, bus_id in enumerate(self.bus_ids)}

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    @cached_property
    def slack_index(self) -> int:
        slack = [i for i, b in enumerate(self.buses) if b.is_slack]
        if len(slack) != 1:
            raise NetworkError(f"Expected exactly one slack bus, found {len(slack)}")
        return slack[0]

    @property
    def slack_id(self) -> int:
        return self.buses[self.slack_index].id

    @cached_property
    def k_factors(self) -> np.ndarray:
        return np.array([reactive_coupling(b.cos_phi) for b in self.buses])

    @cached_property
    def line_r(self) -> np.ndarray:
        return np.array([ln.r for ln in self.lines], dtype=float)

    @cached_property
    def line_x(self) -> np.ndarray:
        return np.array([ln.x for ln in self.lines], dtype=float)

    @cached_property
    def line_s(self) -> np.ndarray:
        return np.array([ln.s_rating for ln in self.lines], dtype=float)

    @cached_property
    def v_min_sq(self) -> np.ndarray:
        return np.array([b.v_min ** 2 for b in self.buses])

    @cached_property
    def v_max_sq(self) -> np.ndarray:
        return np.array([b.v_max ** 2 for b in self.buses])

    @property
    def line_keys(self) -> Tuple[Tuple[int, int], ...]:
        return tuple(ln.key for ln in self.lines)

    def injections(self, period: int = 0) -> np.ndarray:
        """Forecast active injections for one period position (per-unit)."""
        return np.array([b.p_inj[period] for b in self.buses], dtype=float)

    def dt(self, period: int = 0) -> float:
        return self.periods[period].dt_hours


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str


@dataclass
class ValidationReport:
    violations: List[Violation]

    @property
    def accepted(self) -> bool:
        return not self.violations

    @property
    def kinds(self) -> List[str]:
        return [v.kind for v in self.violations]

    def __str__(self) -> str:
        if self.accepted:
            return "network is radial and well-formed"
        return "; ".join(v.message for v in self.violations)


def validate_radial(network: Network) -> ValidationReport:
    """
    Check that a network is a well-formed radial feeder.

    Never raises; every problem found ends up in the returned report.
    """
    violations: List[Violation] = []

    def add(kind: str, message: str):
        violations.append(Violation(kind, message))

    ids = [b.id for b in network.buses]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        add("duplicate_bus", f"duplicate bus ids {duplicates}")

    slacks = [b.id for b in network.buses if b.is_slack]
    if not slacks:
        add("missing_slack", "no slack bus")
    elif len(slacks) > 1:
        add("multiple_slack", f"multiple slack buses {slacks}")

    for b in network.buses:
        if not 0 < b.v_min < b.v_max:
            add("voltage_limits", f"bus {b.id}: need 0 < v_min < v_max, got {b.v_min}, {b.v_max}")
        if not 0 < b.cos_phi <= 1:
            add("power_factor", f"bus {b.id}: cos_phi {b.cos_phi} outside (0, 1]")
        if len(b.p_inj) != network.n_periods:
            add("periods", f"bus {b.id}: {len(b.p_inj)} injections for {network.n_periods} periods")

    known = set(ids)
    graph = nx.Graph()
    graph.add_nodes_from(known)
    seen_pairs = set()
    for ln in network.lines:
        if ln.from_bus == ln.to_bus:
            add("self_loop", f"line {ln.key} connects a bus to itself")
            continue
        missing = [i for i in ln.key if i not in known]
        if missing:
            add("unknown_bus", f"line {ln.key} references unknown buses {missing}")
            continue
        if ln.s_rating <= 0:
            add("nonpositive_rating", f"line {ln.key} has rating {ln.s_rating}")
        if ln.r < 0 or ln.x < 0:
            add("impedance", f"line {ln.key} has negative impedance")
        pair = frozenset(ln.key)
        if pair in seen_pairs:
            add("cycle", f"parallel lines between {sorted(pair)}")
        seen_pairs.add(pair)
        graph.add_edge(*ln.key)

    for cycle in nx.cycle_basis(graph):
        add("cycle", f"cycle through buses {sorted(cycle)}")

    if len(slacks) == 1:
        reachable = nx.node_connected_component(graph, slacks[0])
        stranded = sorted(known - reachable)
        if stranded:
            add("disconnected", f"buses {stranded} are not reachable from slack {slacks[0]}")
    elif nx.number_connected_components(graph) > 1:
        add("disconnected", "network has several connected components")

    if len(network.lines) != len(network.buses) - 1:
        add("line_count", f"{len(network.lines)} lines for {len(network.buses)} buses, expected {len(network.buses) - 1}")

    return ValidationReport(violations)


def ensure_radial(network: Network) -> Network:
    """
    Validate a network and orient every line slack -> leaf.

    Raises:
        NetworkError: when the network fails validation
    """
    report = validate_radial(network)
    if not report.accepted:
        raise NetworkError(f"Invalid network: {report}")

    graph = nx.Graph([ln.key for ln in network.lines])
    graph.add_nodes_from(network.bus_ids)
    parent = {child: par for par, child in nx.bfs_edges(graph, network.slack_id)}

    oriented = []
    flips = 0
    for ln in network.lines:
        if parent.get(ln.to_bus) == ln.from_bus:
            oriented.append(ln)
        else:
            oriented.append(ln.flipped())
            flips += 1
    if flips:
        logger.debug("Re-oriented %d lines away from the slack bus", flips)
    return replace(network, lines=tuple(oriented))


@dataclass(frozen=True)
class PathMatrix:
    """a[l, n] = 1 iff line l lies on the slack -> n path."""

    a: np.ndarray
    line_keys: Tuple[Tuple[int, int], ...]
    bus_ids: Tuple[int, ...]

    def depth(self) -> np.ndarray:
        return self.a.sum(axis=0).astype(int)

    def lines_to(self, bus_id: int) -> List[Tuple[int, int]]:
        col = self.bus_ids.index(bus_id)
        return [key for key, on_path in zip(self.line_keys, self.a[:, col]) if on_path]


def build_path_matrix(network: Network) -> PathMatrix:
    """Path matrix of a radial network (lines in input order, buses in input order)."""
    oriented = ensure_radial(network)
    line_pos = {ln.key: i for i, ln in enumerate(oriented.lines)}
    tree = nx.DiGraph([ln.key for ln in oriented.lines])
    tree.add_nodes_from(oriented.bus_ids)

    a = np.zeros((oriented.n_lines, oriented.n_buses))
    for n, bus_id in enumerate(oriented.bus_ids):
        path = nx.shortest_path(tree, oriented.slack_id, bus_id)
        for edge in zip(path[:-1], path[1:]):
            a[line_pos[edge], n] = 1.0
    return PathMatrix(a=a, line_keys=oriented.line_keys, bus_ids=oriented.bus_ids)


def reactive_coupling(cos_phi: float) -> float:
    """K = sqrt((1 - cos^2) / cos^2), the reactive/active ratio at fixed power factor."""
    if not 0 < cos_phi <= 1:
        raise NetworkError(f"cos_phi must lie in (0, 1], got {cos_phi}")
    return float(np.sqrt((1.0 - cos_phi ** 2) / cos_phi ** 2))


@dataclass(frozen=True)
class FlowState:
    """Line flows (per-unit, positive toward the leaves) and squared voltages."""

    p_flow: np.ndarray
    q_flow: np.ndarray
    u: np.ndarray

    @property
    def apparent_sq(self) -> np.ndarray:
        return self.p_flow ** 2 + self.q_flow ** 2


def lindistflow_solve(
    network: Network,
    injections: Union[Sequence[float], np.ndarray],
    flex: Optional[Union[Sequence[float], np.ndarray]] = None,
    path_matrix: Optional[PathMatrix] = None,
) -> FlowState:
    """
    Evaluate the lossless LinDistFlow equations for given nodal injections.

    Injections (and flexibility activations) are generation-positive and
    may carry leading batch dimensions, e.g. one row per scenario. Reactive
    injections follow Q = K * P at every bus.

    Args:
        network: Radial network
        injections: Active injections, shape (..., N), per-unit
        flex: Flexibility activation added to the injections, same shape
        path_matrix: Pre-built path matrix for repeated calls

    Returns:
        FlowState with arrays of shape (..., L) and (..., N)
    """
    pm = path_matrix if path_matrix is not None else build_path_matrix(network)
    net = np.asarray(injections, dtype=float)
    if flex is not None:
        net = net + np.asarray(flex, dtype=float)
    if net.shape[-1] != network.n_buses:
        raise NetworkError(f"Expected {network.n_buses} injections, got {net.shape[-1]}")

    p_flow = -net @ pm.a.T
    q_flow = -(net * network.k_factors) @ pm.a.T
    drop = network.line_r * p_flow + network.line_x * q_flow
    u = network.slack_u0 - 2.0 * drop @ pm.a
    return FlowState(p_flow=p_flow, q_flow=q_flow, u=u)


# --- file formats -----------------------------------------------------------

def network_from_dict(doc: Dict) -> Network:
    """Build a network from the JSON document layout (MW/MVA values)."""
    try:
        base_mva = float(doc.get("base_mva", 1.0))
        periods = tuple(
            Period(int(p["id"]), float(p.get("dt_hours", 1.0)))
            for p in doc.get("periods", [{"id": 0, "dt_hours": 1.0}])
        )
        slack_id = doc.get("slack")
        buses = tuple(
            Bus(
                id=int(b["id"]),
                v_min=float(b["v_min"]),
                v_max=float(b["v_max"]),
                p_inj=tuple(float(p) / base_mva for p in _as_list(b.get("p_inj", 0.0))),
                cos_phi=float(b.get("cos_phi", 1.0)),
                is_slack=bool(b.get("is_slack", slack_id is not None and int(b["id"]) == int(slack_id))),
            )
            for b in doc["buses"]
        )
        lines = tuple(
            Line(
                from_bus=int(ln["from"]),
                to_bus=int(ln["to"]),
                r=float(ln["r"]),
                x=float(ln["x"]),
                s_rating=float(ln["s_rating"]) / base_mva,
            )
            for ln in doc["lines"]
        )
    except (KeyError, TypeError, ValueError) as e:
        raise NetworkError(f"Malformed network document: {e}") from e

    return Network(
        buses=buses,
        lines=lines,
        base_mva=base_mva,
        base_kv=float(doc.get("base_kv", 1.0)),
        periods=periods,
        slack_u0=float(doc.get("slack_u0", 1.0)),
    )


def network_to_dict(network: Network) -> Dict:
    base = network.base_mva
    return {
        "base_mva": base,
        "base_kv": network.base_kv,
        "slack_u0": network.slack_u0,
        "periods": [{"id": p.id, "dt_hours": p.dt_hours} for p in network.periods],
        "buses": [
            {
                "id": b.id,
                "v_min": b.v_min,
                "v_max": b.v_max,
                "cos_phi": b.cos_phi,
                "is_slack": b.is_slack,
                "p_inj": [round(p * base, 10) for p in b.p_inj],
            }
            for b in network.buses
        ],
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x, "s_rating": round(ln.s_rating * base, 10)}
            for ln in network.lines
        ],
    }


def load_network(path: Union[str, Path], base_mva: float = 1.0) -> Network:
    """
    Load a network from a JSON file, or from a directory holding
    buses.csv and lines.csv.

    Raises:
        FileNotFoundError: when the path does not exist
        NetworkError: when the content is malformed
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Network file not found: {path}")
    if path.is_dir():
        return _network_from_csv(path / "buses.csv", path / "lines.csv", base_mva)
    try:
        with open(path, "r") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise NetworkError(f"Network file {path} is not valid JSON: {e}") from e
    return network_from_dict(doc)


def save_network(network: Network, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(network_to_dict(network), f, indent=2, sort_keys=True)


def _network_from_csv(buses_csv: Path, lines_csv: Path, base_mva: float) -> Network:
    for p in (buses_csv, lines_csv):
        if not p.exists():
            raise FileNotFoundError(f"Network file not found: {p}")
    buses_df = pd.read_csv(buses_csv)
    lines_df = pd.read_csv(lines_csv)

    inj_cols = sorted(
        (c for c in buses_df.columns if c == "p_inj" or c.startswith("p_inj_")),
        key=lambda c: int(c.split("_")[-1]) if c != "p_inj" else 0,
    )
    if not inj_cols:
        raise NetworkError(f"{buses_csv} has no p_inj column")

    doc = {
        "base_mva": base_mva,
        "periods": [{"id": t, "dt_hours": 1.0} for t in range(len(inj_cols))],
        "buses": [
            {
                "id": int(row["id"]),
                "v_min": row["v_min"],
                "v_max": row["v_max"],
                "cos_phi": row.get("cos_phi", 1.0),
                "is_slack": bool(row.get("is_slack", False)),
                "p_inj": [row[c] for c in inj_cols],
            }
            for _, row in buses_df.iterrows()
        ],
        "lines": lines_df.to_dict(orient="records"),
    }
    return network_from_dict(doc)


def _as_list(value) -> List:
    return list(value) if isinstance(value, (list, tuple)) else [value]
