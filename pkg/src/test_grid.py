"""Tests for the radial grid model and LinDistFlow evaluation."""

from collections import deque

import numpy as np
import pytest

from conftest import make_network, random_tree
from grid import (
    NetworkError,
    build_path_matrix,
    ensure_radial,
    lindistflow_solve,
    load_network,
    network_from_dict,
    network_to_dict,
    reactive_coupling,
    save_network,
    validate_radial,
)


def bfs_path_oracle(network):
    """Path matrix from parent pointers found by a plain breadth-first search."""
    adjacency = {b: [] for b in network.bus_ids}
    for ln in network.lines:
        adjacency[ln.from_bus].append(ln.to_bus)
        adjacency[ln.to_bus].append(ln.from_bus)
    parent = {network.slack_id: None}
    queue = deque([network.slack_id])
    while queue:
        node = queue.popleft()
        for nxt in adjacency[node]:
            if nxt not in parent:
                parent[nxt] = node
                queue.append(nxt)

    line_pos = {}
    for l, ln in enumerate(network.lines):
        line_pos[(ln.from_bus, ln.to_bus)] = l
        line_pos[(ln.to_bus, ln.from_bus)] = l
    a = np.zeros((network.n_lines, network.n_buses))
    for n, bus in enumerate(network.bus_ids):
        node = bus
        while parent[node] is not None:
            a[line_pos[(parent[node], node)], n] = 1.0
            node = parent[node]
    return a


def test_valid_chain_has_empty_report(chain3):
    report = validate_radial(chain3)
    assert report.accepted
    assert report.violations == []


def test_triangle_is_a_cycle():
    net = make_network([0.0, 0.0, 0.0], [(0, 1), (1, 2), (2, 0)])
    report = validate_radial(net)
    assert "cycle" in report.kinds
    with pytest.raises(NetworkError, match="cycle"):
        ensure_radial(net)


def test_disconnected_buses_are_reported():
    net = make_network([0.0, 0.0, 0.0, 0.0], [(0, 1), (2, 3)])
    report = validate_radial(net)
    assert "disconnected" in report.kinds
    assert "[2, 3]" in str(report)


def test_several_problems_are_collected_together():
    net = make_network([0.0, 0.0], [(0, 0)], rating=-1.0, v_limits=(1.1, 0.9))
    kinds = set(validate_radial(net).kinds)
    assert {"self_loop", "voltage_limits"} <= kinds


def test_ensure_radial_orients_lines_away_from_slack():
    net = ensure_radial(make_network([0.0, 0.0, 0.0], [(1, 0), (2, 1)]))
    assert net.line_keys == ((0, 1), (1, 2))


def test_chain_path_matrix(chain3):
    pm = build_path_matrix(chain3)
    a = {key: row for key, row in zip(pm.line_keys, pm.a)}
    assert a[(0, 1)][1] == 1 and a[(0, 1)][2] == 1
    assert a[(1, 2)][1] == 0 and a[(1, 2)][2] == 1
    assert pm.lines_to(2) == [(0, 1), (1, 2)]
    np.testing.assert_array_equal(pm.depth(), [0, 1, 2])


def test_star_path_matrix(star4):
    pm = build_path_matrix(star4)
    for l, (_, k) in enumerate(pm.line_keys):
        for m in range(4):
            assert pm.a[l, m] == (1.0 if k == m else 0.0)


@pytest.mark.parametrize("seed", range(50))
def test_path_matrix_matches_bfs_oracle(seed):
    rng = np.random.default_rng(1000 + seed)
    net = ensure_radial(random_tree(int(rng.integers(2, 51)), seed))
    np.testing.assert_array_equal(build_path_matrix(net).a, bfs_path_oracle(net))


def test_path_matrix_rejects_invalid_network():
    with pytest.raises(NetworkError):
        build_path_matrix(make_network([0.0, 0.0, 0.0], [(0, 1), (1, 2), (2, 0)]))


@pytest.mark.parametrize("cos_phi, expected", [
    (1.0, 0.0),
    (0.95, 0.32868),
    (1 / np.sqrt(2), 1.0),
])
def test_reactive_coupling(cos_phi, expected):
    assert reactive_coupling(cos_phi) == pytest.approx(expected, abs=1e-5)


@pytest.mark.parametrize("cos_phi", [0.0, -0.5, 1.2])
def test_reactive_coupling_rejects_out_of_range(cos_phi):
    with pytest.raises(NetworkError, match=str(cos_phi)):
        reactive_coupling(cos_phi)


def test_zero_injections_give_flat_profile(chain3):
    state = lindistflow_solve(chain3, np.zeros(3))
    np.testing.assert_allclose(state.p_flow, 0.0)
    np.testing.assert_allclose(state.u, 1.0)


def test_two_bus_hand_evaluation():
    net = ensure_radial(make_network([0.0, -1.0], [(0, 1)], r=0.01, x=0.0))
    state = lindistflow_solve(net, net.injections(0))
    assert state.p_flow[0] == pytest.approx(1.0)
    assert state.u[1] == pytest.approx(0.98)


def test_flows_are_linear_in_injections():
    net = ensure_radial(random_tree(12, 3))
    rng = np.random.default_rng(0)
    x1, x2 = rng.normal(size=(2, 12))
    s1, s2, s12 = (lindistflow_solve(net, x) for x in (x1, x2, x1 + x2))
    np.testing.assert_allclose(s1.p_flow + s2.p_flow, s12.p_flow, atol=1e-12)
    np.testing.assert_allclose(s1.q_flow + s2.q_flow, s12.q_flow, atol=1e-12)
    np.testing.assert_allclose((s1.u - 1) + (s2.u - 1), s12.u - 1, atol=1e-12)


def test_voltage_telescopes_along_slack_path():
    net = ensure_radial(random_tree(20, 5))
    pm = build_path_matrix(net)
    state = lindistflow_solve(net, net.injections(0), path_matrix=pm)
    drop = net.line_r * state.p_flow + net.line_x * state.q_flow
    for n in range(net.n_buses):
        expected = net.slack_u0 - 2.0 * sum(drop[l] for l in range(net.n_lines) if pm.a[l, n])
        assert state.u[n] == pytest.approx(expected, abs=1e-12)


def test_flow_change_equals_path_matrix_times_injection_change():
    net = ensure_radial(random_tree(15, 9))
    pm = build_path_matrix(net)
    base = lindistflow_solve(net, net.injections(0), path_matrix=pm)
    xi = np.random.default_rng(2).normal(size=net.n_buses)
    # a shortfall xi lowers the injections
    moved = lindistflow_solve(net, net.injections(0) - xi, path_matrix=pm)
    np.testing.assert_allclose(moved.p_flow - base.p_flow, pm.a @ xi, atol=1e-12)


def test_batched_evaluation_matches_single_calls():
    net = ensure_radial(random_tree(8, 4))
    batch = np.random.default_rng(1).normal(size=(5, 8))
    state = lindistflow_solve(net, batch)
    for k in range(5):
        np.testing.assert_allclose(state.u[k], lindistflow_solve(net, batch[k]).u)


def test_wrong_injection_length_is_rejected(chain3):
    with pytest.raises(NetworkError, match="Expected 3"):
        lindistflow_solve(chain3, np.zeros(4))


def test_json_round_trip_keeps_network(tmp_path):
    net = ensure_radial(random_tree(6, 2))
    save_network(net, tmp_path / "net.json")
    again = load_network(tmp_path / "net.json")
    assert again.line_keys == net.line_keys
    np.testing.assert_allclose(again.injections(0), net.injections(0))
    assert network_to_dict(again) == network_to_dict(net)


def test_mw_values_are_scaled_by_base():
    doc = {
        "base_mva": 10.0,
        "buses": [
            {"id": 0, "v_min": 0.9, "v_max": 1.1, "is_slack": True, "p_inj": [0.0]},
            {"id": 1, "v_min": 0.9, "v_max": 1.1, "p_inj": [-2.0]},
        ],
        "lines": [{"from": 0, "to": 1, "r": 0.01, "x": 0.01, "s_rating": 5.0}],
    }
    net = network_from_dict(doc)
    assert net.injections(0)[1] == pytest.approx(-0.2)
    assert net.line_s[0] == pytest.approx(0.5)


def test_csv_directory_is_loaded(tmp_path):
    (tmp_path / "buses.csv").write_text(
        "id,v_min,v_max,cos_phi,is_slack,p_inj\n0,0.9,1.1,1.0,True,0\n1,0.9,1.1,0.95,False,-0.4\n"
    )
    (tmp_path / "lines.csv").write_text("from,to,r,x,s_rating\n0,1,0.01,0.02,1.0\n")
    net = load_network(tmp_path)
    assert net.slack_id == 0
    assert net.k_factors[1] == pytest.approx(0.32868, abs=1e-5)


def test_missing_network_file_names_the_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.json"):
        load_network(tmp_path / "nope.json")


def test_malformed_network_raises_network_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"buses": [{"id": 0}], "lines": []}')
    with pytest.raises(NetworkError):
        load_network(path)


def test_bundled_case_is_within_limits_without_uncertainty(bundled_paths):
    net = ensure_radial(load_network(bundled_paths[0]))
    state = lindistflow_solve(net, net.injections(0))
    assert validate_radial(net).accepted
    assert (np.sqrt(state.apparent_sq) <= net.line_s).all()
    assert (state.u >= net.v_min_sq).all() and (state.u <= net.v_max_sq).all()
