"""Tests for real-time dispatch, out-of-sample checks, welfare and gap bounds."""

import json

import numpy as np
import pytest

from conftest import zero_model
from evaluate import (
    EvaluationError,
    GapOffer,
    ProcuredFlexibility,
    check_comparable,
    dispatch_scenarios,
    gap_bounds,
    load_gap_instance,
    out_of_sample,
    realtime_dispatch,
    welfare,
)
from flexreq import BalanceMode, FlexRequestProblem, FlexRequestSet, create_flexrequests
from grid import build_path_matrix
from market import (
    Bid,
    BidKind,
    Direction,
    RealTimePrices,
    ZonePartition,
    clear_deterministic,
    clear_stochastic,
    requests_from_records,
)
from uncertainty import EpsilonConfig, ForecastErrorModel, ScenarioSet, Source


def procured(network, up=None, down=None):
    """Capacities in MW for a one-period network, given as {bus: MW}."""
    caps = ProcuredFlexibility.none(network)
    for values, target in ((up or {}, caps.up), (down or {}, caps.down)):
        for bus, mw in values.items():
            target[0, network.index_of[bus]] = mw
    return caps


def noisy_model(bus, variance=0.01):
    return ForecastErrorModel((Source("W", bus),), np.array([[variance]]))


def test_no_error_within_limits_costs_nothing(chain3):
    result = realtime_dispatch(chain3, ProcuredFlexibility.none(chain3), np.zeros(1), zero_model(2))
    assert result.total_cost == 0.0
    assert not result.shedding.any() and not result.curtailment.any()


def test_dso_balances_a_shortfall_with_procured_flexibility(chain3):
    result = realtime_dispatch(
        chain3, procured(chain3, up={2: 0.2}), np.array([0.1]), noisy_model(2),
        prices=RealTimePrices(activation=10.0), mode=BalanceMode.DSO_RESPONSIBLE,
    )
    assert result.activation[0, 2] == pytest.approx(0.1, abs=1e-6)
    assert result.costs["activation"] == pytest.approx(1.0, abs=1e-5)
    assert result.costs["shedding"] == pytest.approx(0.0, abs=1e-6)


def test_slack_absorbs_a_load_spike_when_the_dso_is_not_responsible(chain3):
    result = realtime_dispatch(chain3, procured(chain3, up={2: 0.2}), np.array([0.1]), noisy_model(2), prices=RealTimePrices(activation=10.0))
    assert result.total_cost == 0.0
    assert not result.activation.any() and not result.shedding.any()


def test_dso_without_flexibility_sheds_load(chain3):
    result = realtime_dispatch(chain3, ProcuredFlexibility.none(chain3), np.array([0.1]), noisy_model(2), mode=BalanceMode.DSO_RESPONSIBLE)
    assert result.shedding.sum() == pytest.approx(0.1, abs=1e-6)
    assert result.costs["shedding"] == pytest.approx(20.0, abs=1e-4)
    assert result.total_cost == pytest.approx(20.0, abs=1e-4)


def test_procured_down_capacity_relieves_an_overload(overloaded_chain):
    result = realtime_dispatch(
        overloaded_chain, procured(overloaded_chain, down={2: 0.5}), np.zeros(1), zero_model(2),
        prices=RealTimePrices(activation=5.0),
    )
    assert result.activation[0, 2] == pytest.approx(-0.2, abs=1e-6)
    assert result.costs["activation"] == pytest.approx(1.0, abs=1e-5)
    assert result.curtailment.sum() == pytest.approx(0.0, abs=1e-6)
    assert np.sqrt(result.flows[0].apparent_sq[1]) <= overloaded_chain.line_s[1] + 1e-6


def test_without_capacity_the_overload_is_curtailed(overloaded_chain):
    result = realtime_dispatch(overloaded_chain, ProcuredFlexibility.none(overloaded_chain), np.zeros(1), zero_model(2))
    assert result.curtailment[0, 2] == pytest.approx(0.2, abs=1e-6)
    assert result.total_cost == pytest.approx(12.0, abs=1e-4)


def test_scenario_shape_is_checked(chain3):
    with pytest.raises(EvaluationError, match="shape"):
        realtime_dispatch(chain3, ProcuredFlexibility.none(chain3), np.zeros(3), zero_model(2))


def test_negative_prices_are_rejected(chain3):
    with pytest.raises(EvaluationError, match="nonnegative"):
        realtime_dispatch(chain3, ProcuredFlexibility.none(chain3), np.zeros(1), zero_model(2), prices=RealTimePrices(shedding=-1.0))


def test_capacities_are_validated(chain3):
    with pytest.raises(EvaluationError, match="nonnegative"):
        ProcuredFlexibility(chain3.bus_ids, (0,), -np.ones((1, 3)), np.zeros((1, 3)))
    with pytest.raises(EvaluationError, match="shape"):
        ProcuredFlexibility(chain3.bus_ids, (0,), np.zeros((1, 2)), np.zeros((1, 3)))


def test_dispatch_keeps_scenario_order(overloaded_chain):
    scenarios = ScenarioSet(np.array([[[0.0]], [[-0.1]], [[0.1]]]), ("W",))
    results = dispatch_scenarios(overloaded_chain, ProcuredFlexibility.none(overloaded_chain), scenarios, noisy_model(2))
    # realized injection at bus 2 is 1.2 - xi
    np.testing.assert_allclose([r.curtailment[0, 2] for r in results], [0.2, 0.3, 0.1], atol=1e-6)


# --- out-of-sample ----------------------------------------------------------

def test_without_errors_requests_are_never_violated(overloaded_chain):
    requests = create_flexrequests(FlexRequestProblem.create(overloaded_chain, zero_model(2)))
    scenarios = ScenarioSet(np.zeros((100, 1, 1)), ("W",))
    report = out_of_sample("flexrequest", requests, overloaded_chain, zero_model(2), scenarios)
    assert report.max_frequency == 0.0
    assert report.count == 100
    assert {"rating", "voltage_low", "voltage_high", "request_up", "request_down"} <= set(report.frequencies)


def test_without_flexibility_the_overload_is_always_violated(overloaded_chain):
    zeros = np.zeros((1, 3))
    nothing = FlexRequestSet(overloaded_chain.bus_ids, (0,), zeros, zeros, zeros, zeros)
    scenarios = ScenarioSet(np.zeros((100, 1, 1)), ("W",))
    report = out_of_sample("flexrequest", nothing, overloaded_chain, zero_model(2), scenarios)
    assert report.frequencies["rating"] == 1.0
    assert report.worst == ("rating", "1-2@0")


def test_out_of_sample_needs_enough_scenarios(overloaded_chain):
    requests = create_flexrequests(FlexRequestProblem.create(overloaded_chain, zero_model(2)))
    with pytest.raises(EvaluationError, match="at least"):
        out_of_sample("flexrequest", requests, overloaded_chain, zero_model(2), ScenarioSet(np.zeros((10, 1, 1)), ("W",)))


def test_unknown_solution_kind_is_rejected(overloaded_chain):
    requests = create_flexrequests(FlexRequestProblem.create(overloaded_chain, zero_model(2)))
    with pytest.raises(EvaluationError, match="unknown solution kind"):
        out_of_sample("robust", requests, overloaded_chain, zero_model(2), ScenarioSet(np.zeros((100, 1, 1)), ("W",)))


# --- welfare ----------------------------------------------------------------

def test_welfare_of_one_accepted_offer():
    offers = [Bid("o", 1, 0, Direction.UP, BidKind.OFFER, 2.0, 30.0)]
    report = welfare("deterministic", offers, {"o": 1.0}, [], request_prices=(70.0, 40.0))
    assert report.procurement_welfare == pytest.approx(40.0)
    assert report.social_welfare == pytest.approx(40.0)
    assert report.dso_cost == pytest.approx(70.0)
    assert report.to_dict()["procured_up_mw"] == 1.0


def test_every_market_costs_the_dso_less_than_no_market(overloaded_chain):
    model = zero_model(2)
    scenarios = ScenarioSet(np.zeros((3, 1, 1)), ("W",))
    pm = build_path_matrix(overloaded_chain)
    offers = [
        Bid("o-2-down", 2, 0, Direction.DOWN, BidKind.OFFER, 0.5, 30.0),
        Bid("o-2-up", 2, 0, Direction.UP, BidKind.OFFER, 0.5, 30.0),
        Bid("o-1-down", 1, 0, Direction.DOWN, BidKind.OFFER, 0.5, 25.0),
    ]

    requests = create_flexrequests(FlexRequestProblem.create(overloaded_chain, model))
    cleared = clear_deterministic(offers, requests_from_records(requests.to_records()), ZonePartition.nodal(overloaded_chain.bus_ids))
    stochastic = clear_stochastic(overloaded_chain, pm, offers, model, EpsilonConfig())

    def run(procured):
        return dispatch_scenarios(overloaded_chain, procured, scenarios, model)

    none = welfare("none", [], {}, run(ProcuredFlexibility.none(overloaded_chain)))
    markets = [
        welfare("deterministic", offers, cleared.accepted, run(ProcuredFlexibility.from_deterministic(cleared, offers, overloaded_chain))),
        welfare("stochastic", offers, stochastic.accepted, run(ProcuredFlexibility.from_stochastic(stochastic))),
    ]
    check_comparable([none, *markets])
    assert none.dso_cost == pytest.approx(12.0, abs=1e-4)
    for report in markets:
        assert report.procured_down_mw == pytest.approx(0.2, abs=1e-5)
        assert none.dso_cost > report.dso_cost


def test_scenario_counts_must_agree():
    with pytest.raises(EvaluationError, match="dispatches"):
        welfare("x", [], {}, [], scenario_count=5)
    reports = [welfare("a", [], {}, []), welfare("b", [], {}, [])]
    reports[1].scenario_count = 3
    with pytest.raises(EvaluationError, match="different scenario counts"):
        check_comparable(reports)


# --- gap bounds -------------------------------------------------------------

HAND_OFFERS = [GapOffer(1, 20.0, 2.0), GapOffer(2, 40.0, 1.0)]


def test_location_restriction_gap_by_hand():
    report = gap_bounds({1: 1.0, 2: 1.0}, HAND_OFFERS, {}, 60.0)
    assert (report.l_u, report.l_sc, report.l_fr) == pytest.approx((80.0, 80.0, 60.0))
    assert report.xi_sc == pytest.approx(0.0)
    assert report.xi_fr == pytest.approx(0.25)
    assert report.xi_fs == pytest.approx(0.25)
    assert report.level == 1


def test_local_liquidity_closes_every_gap():
    report = gap_bounds({1: 1.0}, HAND_OFFERS, {}, 60.0)
    assert report.level == 2
    assert report.xi_sc == report.xi_fr == report.xi_fs == pytest.approx(0.0)


def test_partial_shares_leave_nodes_short():
    report = gap_bounds({1: 1.0, 2: 1.0}, HAND_OFFERS, {2: 0.5}, 60.0)
    assert report.level == 3
    assert report.l_fr == pytest.approx(50.0)
    assert not report.fully_matched["FR"]
    assert report.xi_fs == pytest.approx(0.375)


def test_system_shortage_is_level_four():
    report = gap_bounds({1: 5.0}, HAND_OFFERS, {}, 60.0)
    assert report.level == 4
    assert "insufficient liquidity in the system" == report.classification


def test_expensive_offers_are_ignored():
    report = gap_bounds({1: 1.0}, [GapOffer(1, 90.0, 5.0)], {}, 60.0)
    assert report.l_u == 0.0
    assert report.xi_fr is None
    assert report.level == 4


@pytest.mark.parametrize("shares", [{1: 0.0}, {1: 1.5}])
def test_shares_must_be_in_unit_interval(shares):
    with pytest.raises(EvaluationError, match="shares"):
        gap_bounds({1: 1.0}, HAND_OFFERS, shares, 60.0)


def test_gap_ordering_on_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        buses = range(1, int(rng.integers(2, 6)))
        requests = {b: float(rng.uniform(0, 2)) for b in buses if rng.random() < 0.8}
        offers = [GapOffer(int(rng.choice(list(buses))), float(rng.uniform(10, 80)), float(rng.uniform(0.1, 2))) for _ in range(int(rng.integers(0, 8)))]
        shares = {b: float(rng.uniform(0.1, 1.0)) for b in buses if rng.random() < 0.5}
        report = gap_bounds(requests, offers, shares, 60.0)
        assert report.l_u >= report.l_sc - 1e-9
        assert report.l_sc >= report.l_fr - 1e-9
        for xi in (report.xi_sc, report.xi_fr, report.xi_fs):
            assert xi is None or -1e-9 <= xi <= 1 + 1e-9


def test_gap_instance_file(tmp_path):
    path = tmp_path / "gap.json"
    path.write_text(json.dumps({
        "requests": {"1": 1.0, "2": 1.0},
        "offers": [{"bus": 1, "price": 20, "quantity": 2}, {"bus": 2, "price": 40, "quantity": 1}],
        "price": 60,
    }))
    requests, offers, shares, price = load_gap_instance(path)
    assert requests == {1: 1.0, 2: 1.0}
    assert offers == HAND_OFFERS
    assert shares == {} and price == 60.0


def test_malformed_gap_instance(tmp_path):
    path = tmp_path / "gap.json"
    path.write_text('{"offers": []}')
    with pytest.raises(EvaluationError, match="Malformed"):
        load_gap_instance(path)
    with pytest.raises(FileNotFoundError):
        load_gap_instance(tmp_path / "missing.json")
