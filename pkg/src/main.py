"""
FlexRequest Toolkit - command line front end
Orchestrates request creation, market clearing and evaluation, writing every
artifact into a run directory named by the configuration hash.
"""

import argparse
import logging
import sys
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from config import ConfigError, ExperimentConfig, load_config
from evaluate import (
    ProcuredFlexibility,
    WelfareReport,
    check_comparable,
    dispatch_scenarios,
    gap_bounds,
    load_gap_instance,
    out_of_sample,
    welfare,
)
from flexreq import (
    BalanceMode,
    FlexRequestProblem,
    FlexRequestSet,
    InfeasibleError,
    create_flexrequests,
    create_flexrequests_sampled,
    load_request_records,
    price_discovery,
)
from generate import gen_bids, gen_network, gen_scenarios
from grid import build_path_matrix, ensure_radial, load_network
from market import (
    Bid,
    RealTimePrices,
    ZonePartition,
    bids_to_frame,
    build_stochastic_program,
    clear_deterministic,
    clear_stochastic,
    generate_offers,
    load_bids,
    requests_from_records,
    zones_from_congestion,
)
from report import (
    audit_lines,
    clearing_summary,
    dso_cost_table,
    evaluation_summary,
    gap_summary,
    gap_table,
    request_summary,
    request_table,
    stochastic_summary,
    violation_table,
    welfare_table,
)
from socp import ConeProgram, SolveError, dump, solve
from store import RunStore
from uncertainty import ForecastErrorModel, ScenarioSet, estimate_covariance, load_error_model, sample_scenarios


logger = logging.getLogger("flexreq")

EXIT_OK = 0
EXIT_SOLVER = 1
EXIT_INPUT = 2


class Console:
    """Progress lines in the terminal; silent with --quiet."""

    def __init__(self, quiet: bool = False):
        self.quiet = quiet

    def __call__(self, message: str = ""):
        if not self.quiet:
            print(message)


class Experiment:
    """Lazily loaded inputs of one configuration, shared by every subcommand."""

    def __init__(self, config: ExperimentConfig, store: RunStore, console: Console, dump_programs: bool = False):
        self.config = config
        self.store = store
        self.say = console
        self.dump_programs = dump_programs

    # --- inputs -------------------------------------------------------------

    @cached_property
    def network(self):
        network = ensure_radial(load_network(self.config.network))
        self.say(f"🔌 Network: {network.n_buses} buses, {network.n_lines} lines, {network.n_periods} period(s)")
        return network

    @cached_property
    def pathmatrix(self):
        return build_path_matrix(self.network)

    @cached_property
    def _model_file(self):
        return load_error_model(self.config.model, base_mva=self.network.base_mva)

    @property
    def true_model(self) -> ForecastErrorModel:
        return self._model_file[0]

    @cached_property
    def epsilons(self):
        return self.config.epsilon_config(self._model_file[1])

    @property
    def mode(self) -> BalanceMode:
        return BalanceMode(self.config.mode)

    @property
    def request_prices(self):
        return (self.config.prices["request_up"], self.config.prices["request_down"])

    @property
    def realtime_prices(self) -> RealTimePrices:
        p = self.config.prices
        return RealTimePrices(activation=p["activation"], shedding=p["shedding"], curtailment=p["curtailment"])

    @cached_property
    def estimation_scenarios(self) -> ScenarioSet:
        return sample_scenarios(self.true_model, self.config.estimation_scenarios, self.config.estimation_seed, self.network.n_periods)

    @cached_property
    def model(self) -> ForecastErrorModel:
        """The error model the optimization sees: estimated from samples unless disabled."""
        if not self.config.estimate_covariance:
            return self.true_model
        sigma = estimate_covariance(self.estimation_scenarios, self.config.covariance_confidence)
        self.say(f"📈 Covariance estimated from {self.estimation_scenarios.count} scenarios")
        return ForecastErrorModel(self.true_model.sources, sigma)

    @cached_property
    def out_of_sample_scenarios(self) -> ScenarioSet:
        return sample_scenarios(self.true_model, self.config.out_of_sample_scenarios, self.config.out_of_sample_seed, self.network.n_periods)

    def on_program(self) -> Optional[Callable[[ConeProgram], None]]:
        if not self.dump_programs:
            return None
        return lambda program: self.store.write_text(f"programs/{program.name}.txt", dump(program))

    # --- steps --------------------------------------------------------------

    def create_requests(self) -> FlexRequestSet:
        problem = FlexRequestProblem(
            network=self.network,
            pathmatrix=self.pathmatrix,
            model=self.model,
            epsilons=self.epsilons,
            mode=self.mode,
            tie_break=self.config.tie_break,
        )
        self.say(f"⚡ Creating FlexRequests ({self.config.method}, {self.mode.value})...")
        if self.config.method == "sampled":
            requests = create_flexrequests_sampled(problem, self.estimation_scenarios, self.request_prices, self.config.solver_tol)
        else:
            requests = create_flexrequests(problem, self.request_prices, self.config.solver_tol, self.on_program())
        self.say(f"✅ {requests.total_up:.4f} MW up, {requests.total_down:.4f} MW down requested")
        return requests

    def request_bids(self) -> List[Bid]:
        if self.config.requests:
            records = load_request_records(self.config.requests)
            self.say(f"📥 Loaded {len(records)} requests from {self.config.requests}")
        else:
            records = self.create_requests().to_records()
        return requests_from_records(records)

    def offers(self, liquidity: str) -> List[Bid]:
        if self.config.bids:
            return load_bids(self.config.bids)
        p = self.config.prices
        return generate_offers(
            self.network,
            self.config.offer_seed,
            liquidity,
            (p["offer_min"], p["offer_max"]),
            tuple(self.config.offer_quantity),
        )

    def zone_partition(self, name: str) -> ZonePartition:
        if name == "nodal":
            return ZonePartition.nodal(self.network.bus_ids)
        if name == "single":
            return ZonePartition.single(self.network.bus_ids)
        if name == "congestion":
            return zones_from_congestion(
                self.network,
                self.model,
                self.config.congestion_samples,
                self.config.congestion_threshold,
                self.config.zone_seed,
                self.config.congestion_margin,
                pathmatrix=self.pathmatrix,
            )
        zones = ZonePartition.from_json(name)
        if not zones.covers(self.network.bus_ids):
            raise ValueError(f"zone file {name} does not cover every bus of the network")
        return zones

    def clear_stochastic(self, offers: Sequence[Bid]):
        return clear_stochastic(
            self.network,
            self.pathmatrix,
            offers,
            self.model,
            self.epsilons,
            self.realtime_prices,
            self.mode,
            solver_tol=self.config.solver_tol,
            on_program=self.on_program(),
        )

    def in_model_cost(self, procured: ProcuredFlexibility, offers: Sequence[Bid]) -> Optional[float]:
        """Expected cost of fixed procured volumes under re-optimized policies."""
        program = build_stochastic_program(
            self.network, self.pathmatrix, offers, self.model, self.epsilons,
            self.realtime_prices, self.mode, fixed_procurement=(procured.up, procured.down),
        )
        solution = solve(program, tol=self.config.solver_tol)
        if not solution.optimal:
            logger.warning("Fixed-procurement evaluation is %s", solution.status.value)
            return None
        return solution.objective

    def dispatch(self, procured: ProcuredFlexibility):
        return dispatch_scenarios(
            self.network,
            procured,
            self.out_of_sample_scenarios.head(self.config.dispatch_scenarios),
            self.true_model,
            self.realtime_prices,
            self.mode,
            self.config.solver_tol,
            self.config.workers,
        )


def zone_label(name: str) -> str:
    return name if name in ("nodal", "single", "congestion") else Path(name).stem


# --- subcommands ------------------------------------------------------------

def cmd_gen(args, exp: Experiment) -> int:
    out = Path(args.out) if args.out else exp.store.path("generated")
    if args.kind == "network":
        exp.say(f"🔧 Generating a {args.buses}-bus feeder (seed {args.seed})...")
        network_path, model_path = gen_network(out, args.buses, args.seed, args.periods)
        exp.say(f"💾 Saved {network_path} and {model_path}")
    elif args.kind == "scenarios":
        count = args.count or exp.config.estimation_scenarios
        path = gen_scenarios(exp.true_model, out / "scenarios.csv", count, args.seed, exp.network.n_periods, exp.network.base_mva)
        exp.say(f"💾 Saved {count} scenarios to {path}")
    else:
        p = exp.config.prices
        for level in exp.config.liquidity:
            path = out / f"bids_{level}.csv"
            offers = gen_bids(exp.network, path, args.seed, level, (p["offer_min"], p["offer_max"]), exp.config.offer_quantity)
            exp.say(f"💾 Saved {len(offers)} offers ({level} liquidity) to {path}")
    return EXIT_OK


def cmd_create_request(args, exp: Experiment) -> int:
    requests = exp.create_requests()
    summary = request_summary(requests, exp.epsilons)
    exp.store.write_json("flexrequests.json", requests.to_records())
    exp.store.write_csv("flexrequests.csv", request_table(requests))
    exp.store.write_text("flexrequests.txt", summary)
    exp.say(summary)
    return EXIT_OK


def cmd_clear_det(args, exp: Experiment) -> int:
    requests = exp.request_bids()
    for level in exp.config.liquidity:
        offers = exp.offers(level)
        exp.say(f"\n🏪 {len(offers)} offers at {level} liquidity")
        for name in exp.config.zones:
            zones = exp.zone_partition(name)
            result = clear_deterministic(offers, requests, zones)
            doc = {"liquidity": level, "zones": zone_label(name), "partition": zones.as_lists(), **result.to_dict()}
            exp.store.write_json(f"clear_det_{level}_{zone_label(name)}.json", doc)
            exp.say(clearing_summary(result, zone_label(name)))
    return EXIT_OK


def cmd_clear_stoch(args, exp: Experiment) -> int:
    for level in exp.config.liquidity:
        offers = exp.offers(level)
        exp.say(f"\n🏪 {len(offers)} offers at {level} liquidity")
        result = exp.clear_stochastic(offers)
        exp.store.write_json(f"clear_stoch_{level}.json", {"liquidity": level, **result.to_dict()})
        exp.say(stochastic_summary(result))
    for line in audit_lines(exp.epsilons):
        exp.say(line)
    return EXIT_OK


def cmd_evaluate(args, exp: Experiment) -> int:
    config = exp.config
    requests = exp.create_requests()
    exp.store.write_json("flexrequests.json", requests.to_records())
    request_bids = requests_from_records(requests.to_records())
    oos = exp.out_of_sample_scenarios

    exp.say(f"\n🔍 Out-of-sample check over {oos.count} scenarios...")
    violations = [out_of_sample("flexrequest", requests, exp.network, exp.true_model, oos, exp.pathmatrix)]

    exp.say(f"⚡ Real-time dispatch over {min(oos.count, config.dispatch_scenarios)} scenarios per mechanism...")
    reports: List[WelfareReport] = [
        welfare("no_market", [], {}, exp.dispatch(ProcuredFlexibility.none(exp.network)), exp.request_prices, liquidity="none")
    ]
    in_model: Dict[str, Optional[float]] = {}

    for level in config.liquidity:
        offers = exp.offers(level)
        exp.say(f"\n🏪 {level} liquidity: {len(offers)} offers")
        exp.store.write_csv(f"offers_{level}.csv", bids_to_frame(offers))

        if "deterministic" in config.mechanisms:
            for name in config.zones:
                label = zone_label(name)
                result = clear_deterministic(offers, request_bids, exp.zone_partition(name))
                procured = ProcuredFlexibility.from_deterministic(result, offers, exp.network)
                reports.append(welfare(f"deterministic/{label}", offers, result.accepted, exp.dispatch(procured), exp.request_prices, liquidity=level))
                exp.say(clearing_summary(result, label))
                if name == "nodal":
                    in_model[f"{level}/deterministic/nodal"] = exp.in_model_cost(procured, offers)

        if "stochastic" in config.mechanisms:
            result = exp.clear_stochastic(offers)
            exp.say(stochastic_summary(result))
            violations.append(out_of_sample("stochastic", result, exp.network, exp.true_model, oos, exp.pathmatrix))
            violations[-1].kind = f"stochastic/{level}"
            procured = ProcuredFlexibility.from_stochastic(result)
            reports.append(welfare("stochastic", offers, result.accepted, exp.dispatch(procured), exp.request_prices, liquidity=level))
            in_model[f"{level}/stochastic"] = result.objective

    check_comparable(reports)
    exp.store.write_csv("welfare.csv", welfare_table(reports))
    exp.store.write_csv("dso_cost.csv", dso_cost_table(reports))
    exp.store.write_csv("violations.csv", violation_table(violations))
    exp.store.write_json("violations.json", [v.to_dict() for v in violations])
    exp.store.write_json("in_model_cost.json", {k: (None if v is None else round(v, 8)) for k, v in in_model.items()})
    if config.gap_input:
        gap_requests, gap_offers, shares, price = load_gap_instance(config.gap_input)
        gap = gap_bounds(gap_requests, gap_offers, shares, price)
        exp.store.write_json("gap.json", gap.to_dict())
        exp.store.write_csv("gap.csv", gap_table(gap))
        exp.say(gap_summary(gap))

    summary = evaluation_summary(reports, violations, exp.epsilons)
    exp.store.write_text("summary.txt", summary)
    exp.say("\n" + summary)
    return EXIT_OK


def cmd_gap(args, exp: Experiment) -> int:
    price = None
    if args.price_from:
        c_inv, c_noinv, p_flex = args.price_from
        price = price_discovery(c_inv, c_noinv, p_flex)
        exp.say(f"💶 Discovered reservation price: {price:.4f} EUR/MW")
        exp.store.write_json("price.json", {"c_inv": c_inv, "c_noinv": c_noinv, "p_flex": p_flex, "price_eur_per_mw": price})

    source = args.input or exp.config.gap_input
    if not source:
        if price is None:
            raise ValueError("gap needs an instance (--input or gap_input) or --price-from")
        return EXIT_OK
    requests, offers, shares, file_price = load_gap_instance(source)
    report = gap_bounds(requests, offers, shares, price if price is not None else file_price)
    exp.store.write_json("gap.json", report.to_dict())
    exp.store.write_csv("gap.csv", gap_table(report))
    exp.say(gap_summary(report))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "create-request": cmd_create_request,
    "clear-det": cmd_clear_det,
    "clear-stoch": cmd_clear_stoch,
    "evaluate": cmd_evaluate,
    "gap": cmd_gap,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    common.add_argument("--quiet", action="store_true", help="No progress output")
    common.add_argument("--dump-programs", action="store_true", help="Write every solved program in canonical text form")
    common.add_argument("--network", help="Network JSON file or directory with buses.csv/lines.csv")
    common.add_argument("--model", help="Error model JSON file")
    common.add_argument("--bids", help="Offer book CSV (replaces generated offers)")
    common.add_argument("--requests", help="FlexRequest records JSON (replaces request creation)")
    common.add_argument("--gap-input", help="Gap-bound instance JSON evaluated alongside the run")
    common.add_argument("--zones", nargs="+", help="Zone variants: nodal, single, congestion or zone files")
    common.add_argument("--liquidity", nargs="+", help="Liquidity levels: high, medium, low, none")
    common.add_argument("--mechanisms", nargs="+", help="deterministic and/or stochastic")
    common.add_argument("--mode", choices=["not_responsible", "dso_responsible"])
    common.add_argument("--method", choices=["chance_constrained", "sampled"])
    common.add_argument("--tie-break", action="store_true", default=None, help="Prefer requests close to the slack bus")
    common.add_argument("--estimation-scenarios", type=int)
    common.add_argument("--out-of-sample-scenarios", type=int)
    common.add_argument("--dispatch-scenarios", type=int)
    common.add_argument("--offer-seed", type=int)
    common.add_argument("--solver-tol", type=float)
    common.add_argument("--workers", type=int)
    common.add_argument("--runs-dir")

    parser = argparse.ArgumentParser(description="Network-aware FlexRequest creation and flexibility market evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="Generate synthetic datasets")
    gen.add_argument("kind", choices=["network", "scenarios", "bids"])
    gen.add_argument("--buses", type=int, default=15)
    gen.add_argument("--periods", type=int, default=1)
    gen.add_argument("--count", type=int, help="Scenario count")
    gen.add_argument("--seed", type=int, default=7)
    gen.add_argument("--out", help="Output directory (default: <run dir>/generated)")

    sub.add_parser("create-request", parents=[common], help="Create FlexRequests")
    sub.add_parser("clear-det", parents=[common], help="Deterministic (zonal/nodal) clearing")
    sub.add_parser("clear-stoch", parents=[common], help="Stochastic network-aware clearing")
    sub.add_parser("evaluate", parents=[common], help="Full pipeline with welfare and violation reports")

    gap = sub.add_parser("gap", parents=[common], help="Sub-optimality gap bounds")
    gap.add_argument("--input", help="Gap instance JSON")
    gap.add_argument("--price-from", nargs=3, type=float, metavar=("C_INV", "C_NOINV", "P_FLEX"))
    return parser


OVERRIDE_KEYS = (
    "network", "model", "bids", "requests", "gap_input", "zones", "liquidity", "mechanisms", "mode", "method",
    "tie_break", "estimation_scenarios", "out_of_sample_scenarios", "dispatch_scenarios",
    "offer_seed", "solver_tol", "workers", "runs_dir",
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    say = Console(args.quiet)

    try:
        config = load_config(args.config, {k: getattr(args, k) for k in OVERRIDE_KEYS})
    except (FileNotFoundError, ConfigError) as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        return EXIT_INPUT

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else config.log_level.upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    say("=" * 60)
    say(f"FlexRequest Toolkit - {args.command}")
    say("=" * 60)

    store = RunStore(config)
    say(f"📁 Run directory: {store.run_dir}")
    exp = Experiment(config, store, say, dump_programs=args.dump_programs)

    try:
        code = COMMANDS[args.command](args, exp)
    except InfeasibleError as e:
        store.write_json("diagnosis.json", e.diagnosis.to_dict())
        print(f"❌ {e}: {e.diagnosis}", file=sys.stderr)
        return EXIT_SOLVER
    except SolveError as e:
        print(f"❌ Solver error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except FileNotFoundError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as e:
        print(f"❌ Invalid input: {e}", file=sys.stderr)
        return EXIT_INPUT

    say("\n" + "=" * 60)
    say("✨ Run complete!")
    say("=" * 60)
    return code


if __name__ == "__main__":
    sys.exit(main())
