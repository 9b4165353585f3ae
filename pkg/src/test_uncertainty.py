"""Tests for the forecast-error model, margins and affine sensitivities."""

import numpy as np
import pytest
from scipy.stats import chi2, norm

from conftest import make_network, random_tree
from grid import build_path_matrix, ensure_radial, lindistflow_solve
from uncertainty import (
    EpsilonConfig,
    ForecastErrorModel,
    ScenarioSet,
    Source,
    UncertaintyError,
    affine_sensitivities,
    covariance_factor,
    covariance_inflation,
    estimate_covariance,
    gaussian_quantile,
    load_error_model,
    load_scenarios,
    sample_scenarios,
    save_error_model,
    save_scenarios,
    sensitivity_matrices,
    uncertainty_margin,
)


def test_zero_draws_give_zero_covariance():
    sigma = estimate_covariance(ScenarioSet(np.zeros((10, 1, 2)), ("a", "b")))
    np.testing.assert_array_equal(sigma, 0.0)


def test_two_opposite_draws_give_unit_variance():
    sigma = estimate_covariance(ScenarioSet(np.array([[[1.0]], [[-1.0]]]), ("a",)))
    assert sigma[0, 0, 0] == pytest.approx(1.0)


def test_estimate_is_close_and_psd():
    truth = np.array([[1.0, 0.3], [0.3, 0.5]])
    model = ForecastErrorModel((Source("a", 1), Source("b", 2)), truth)
    sigma = estimate_covariance(sample_scenarios(model, 100, seed=11))[0]
    assert np.linalg.eigvalsh(sigma).min() >= -1e-12
    # sampling error of 100 draws
    assert np.linalg.norm(sigma - truth) < 0.6


def test_estimation_needs_two_draws():
    with pytest.raises(UncertaintyError):
        estimate_covariance(ScenarioSet(np.zeros((1, 1, 1)), ("a",)))


def test_inflation_is_the_chi_square_upper_bound():
    assert covariance_inflation(1000, 0.99) == pytest.approx(1000 / chi2.ppf(0.01, 1000))
    assert covariance_inflation(1000, 0.99) > covariance_inflation(1000, 0.95) > 1.0
    assert covariance_inflation(100, 0.99) > covariance_inflation(1000, 0.99)


@pytest.mark.parametrize("count, confidence", [(0, 0.99), (10, 0.0), (10, 1.0)])
def test_inflation_rejects_invalid_arguments(count, confidence):
    with pytest.raises(UncertaintyError):
        covariance_inflation(count, confidence)


def test_confident_estimate_scales_the_sample_covariance():
    model = ForecastErrorModel((Source("a", 1), Source("b", 2)), np.array([[1.0, 0.3], [0.3, 0.5]]))
    scenarios = sample_scenarios(model, 500, seed=5)
    np.testing.assert_allclose(
        estimate_covariance(scenarios, confidence=0.99),
        estimate_covariance(scenarios) * covariance_inflation(500, 0.99),
    )


def test_confident_estimate_rarely_under_covers():
    model = ForecastErrorModel((Source("a", 1),), np.eye(1))
    plain, confident = [], []
    for seed in range(300):
        scenarios = sample_scenarios(model, 1000, seed=seed)
        plain.append(estimate_covariance(scenarios)[0, 0, 0])
        confident.append(estimate_covariance(scenarios, confidence=0.99)[0, 0, 0])
    # the plain estimate falls short of the true variance about half the time
    assert np.mean(np.array(plain) < 1.0) > 0.3
    assert np.mean(np.array(confident) < 1.0) <= 0.03


@pytest.mark.parametrize("p, expected", [(0.5, 0.0), (0.95, 1.64485), (0.98, 2.05375)])
def test_gaussian_quantile(p, expected):
    z = gaussian_quantile(p)
    assert z == pytest.approx(expected, abs=1e-5)
    assert abs(norm.cdf(z) - p) <= 1e-10


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_gaussian_quantile_rejects_out_of_range(p):
    with pytest.raises(UncertaintyError):
        gaussian_quantile(p)


def test_rating_quantiles_use_both_beta_shares():
    q = EpsilonConfig(beta=0.3).quantiles()
    assert q["rating_p"] == pytest.approx(norm.ppf(1 - 0.3 * 0.05 / 1.25))
    assert q["rating_q"] == pytest.approx(norm.ppf(1 - 0.7 * 0.05 / 1.25))
    assert q["aux_q"] == pytest.approx(norm.ppf(1 - 0.7 * 0.05 / 2.5))


def test_default_rating_quantile_is_the_98_percent_level():
    assert EpsilonConfig().quantiles()["rating_p"] == pytest.approx(2.05375, abs=1e-5)


@pytest.mark.parametrize("kwargs", [{"eps_s": 0.0}, {"eps_v": 0.5}, {"beta": 1.0}, {"beta": 0.0}])
def test_invalid_epsilons_are_rejected(kwargs):
    with pytest.raises(UncertaintyError):
        EpsilonConfig(**kwargs)


def test_margin_of_null_sensitivity_is_zero():
    assert uncertainty_margin([0.0], np.array([[4.0]]), 0.05) == 0.0


def test_margin_hand_values():
    sigma = np.array([[4.0]])
    assert uncertainty_margin([1.0], sigma, 0.05) == pytest.approx(3.2897, abs=1e-4)
    assert uncertainty_margin([1.0], sigma, 0.05, scale=1.25) == pytest.approx(3.50138, abs=1e-4)


def test_margin_is_homogeneous_and_monotone():
    sigma = np.array([[1.0, 0.2], [0.2, 2.0]])
    b = np.array([0.4, -1.3])
    assert uncertainty_margin(-3 * b, sigma, 0.05) == pytest.approx(3 * uncertainty_margin(b, sigma, 0.05))
    assert uncertainty_margin(b, sigma, 0.01) > uncertainty_margin(b, sigma, 0.05)


def test_margin_rejects_invalid_level():
    with pytest.raises(UncertaintyError):
        uncertainty_margin([1.0], np.eye(1), 0.05, scale=0.04)


def test_tight_constraint_is_violated_at_the_target_rate():
    sigma = np.array([[1.0, 0.4], [0.4, 0.8]])
    model = ForecastErrorModel((Source("a", 1), Source("b", 2)), sigma)
    b = np.array([0.7, -1.1])
    limit = uncertainty_margin(b, sigma, 0.05)
    draws = sample_scenarios(model, 100_000, seed=5).period(0)
    freq = float((draws @ b > limit).mean())
    assert 0.04 <= freq <= 0.06


@pytest.mark.parametrize("mu", [0.0, 0.1, 0.2, 0.3, 0.35, 0.5, 1.0, 3.0, -0.3])
def test_two_sided_bound_never_under_covers(mu):
    """|mu + xi| <= k with k >= |mu| + Omega(eps/1.25) and k >= Omega(eps/2.5)."""
    sigma = np.array([[2.0]])
    std = np.sqrt(2.0)
    k = max(abs(mu) * std + uncertainty_margin([1.0], sigma, 0.05, scale=1.25),
            uncertainty_margin([1.0], sigma, 0.05, scale=2.5))
    m = mu * std
    violation = norm.sf((k - m) / std) + norm.cdf((-k - m) / std)
    assert violation <= 0.05


def test_zero_covariance_gives_zero_draws():
    model = ForecastErrorModel((Source("a", 1),), np.zeros((1, 1)))
    assert not sample_scenarios(model, 50, seed=1).draws.any()


def test_identity_covariance_is_recovered():
    model = ForecastErrorModel((Source("a", 1), Source("b", 2)), np.eye(2))
    sigma = estimate_covariance(sample_scenarios(model, 100_000, seed=3))[0]
    np.testing.assert_allclose(sigma, np.eye(2), atol=0.05)


def test_same_seed_gives_identical_draws():
    model = ForecastErrorModel((Source("a", 1), Source("b", 2)), np.array([[1.0, 0.5], [0.5, 1.0]]))
    first, second = sample_scenarios(model, 200, seed=42), sample_scenarios(model, 200, seed=42)
    assert np.array_equal(first.draws, second.draws)
    assert not np.array_equal(first.draws, sample_scenarios(model, 200, seed=43).draws)


def test_rank_deficient_covariance_is_regularized():
    sigma = np.array([[1.0, 1.0], [1.0, 1.0]])
    factor = covariance_factor(sigma)
    np.testing.assert_allclose(factor @ factor.T, sigma, atol=1e-8)


@pytest.mark.parametrize("sigma", [np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([[1.0, 0.0], [0.0, -1.0]])])
def test_invalid_covariance_is_rejected(sigma):
    with pytest.raises(UncertaintyError):
        ForecastErrorModel((Source("a", 1), Source("b", 2)), sigma)


def test_sensitivities_reduce_to_path_matrix_without_policy(chain3):
    pm = build_path_matrix(chain3)
    model = ForecastErrorModel(tuple(Source(f"s{n}", n) for n in range(3)), np.eye(3))
    bundle = sensitivity_matrices(chain3, pm, model, np.zeros(3))
    np.testing.assert_array_equal(bundle.b_p, pm.a)
    np.testing.assert_array_equal(bundle.b_f, 0.0)


def test_uniform_power_factor_scales_reactive_sensitivity():
    net = ensure_radial(make_network([0.0, -0.1, -0.1, -0.2], [(0, 1), (1, 2), (1, 3)], cos_phi=0.95))
    model = ForecastErrorModel((Source("a", 2), Source("b", 3)), np.eye(2))
    bundle = sensitivity_matrices(net, build_path_matrix(net), model, np.array([0.0, 0.3, 0.7, 0.0]))
    np.testing.assert_allclose(bundle.b_q, net.k_factors[0] * bundle.b_p)


def test_flexibility_row_replicates_alpha():
    net = ensure_radial(random_tree(5, 1))
    model = ForecastErrorModel((Source("a", 2), Source("b", 4)), np.eye(2))
    alpha = np.array([0.0, 0.1, 0.2, 0.3, 0.4])
    bundle = sensitivity_matrices(net, build_path_matrix(net), model, alpha)
    np.testing.assert_allclose(bundle.b_f, np.outer(alpha, [1.0, 1.0]))


def test_alpha_length_is_checked(chain3):
    model = ForecastErrorModel((Source("a", 2),), np.eye(1))
    with pytest.raises(UncertaintyError):
        sensitivity_matrices(chain3, build_path_matrix(chain3), model, np.zeros(2))


@pytest.mark.parametrize("seed", range(50))
def test_sensitivities_match_finite_differences(seed):
    rng = np.random.default_rng(1000 + seed)
    net = ensure_radial(random_tree(int(rng.integers(3, 51)), seed))
    pm = build_path_matrix(net)
    buses = sorted(rng.choice(np.arange(1, net.n_buses), size=min(2, net.n_buses - 1), replace=False).tolist())
    model = ForecastErrorModel(tuple(Source(f"s{b}", b) for b in buses), np.eye(len(buses)))
    alpha = np.zeros(net.n_buses)
    alpha[1:] = rng.dirichlet(np.ones(net.n_buses - 1))
    bundle = sensitivity_matrices(net, pm, model, alpha)

    gamma = model.incidence(net)
    base = lindistflow_solve(net, net.injections(0), path_matrix=pm)
    for j in range(model.n_sources):
        xi = np.zeros(model.n_sources)
        xi[j] = 1.0
        realized = net.injections(0) - gamma @ xi
        moved = lindistflow_solve(net, realized, flex=alpha * xi.sum(), path_matrix=pm)
        np.testing.assert_allclose(moved.p_flow - base.p_flow, bundle.b_p[:, j], atol=1e-9)
        np.testing.assert_allclose(moved.q_flow - base.q_flow, bundle.b_q[:, j], atol=1e-9)
        np.testing.assert_allclose(moved.u - base.u, bundle.b_u[:, j], atol=1e-9)


def test_affine_form_matches_fixed_alpha(chain3):
    pm = build_path_matrix(chain3)
    model = ForecastErrorModel((Source("a", 2),), np.eye(1))
    alpha = np.array([0.0, 1.0, 0.0])
    aff = affine_sensitivities(chain3, pm, model)
    bundle = sensitivity_matrices(chain3, pm, model, alpha)
    np.testing.assert_allclose(aff["u"].at(alpha), bundle.b_u)
    # bus 1 answers the deviation at bus 2, so only line (1,2) carries it
    np.testing.assert_allclose(bundle.b_p[:, 0], [0.0, 1.0])


def test_error_model_round_trip(tmp_path):
    model = ForecastErrorModel((Source("W1", 3), Source("W2", 5)), np.array([[0.04, 0.01], [0.01, 0.09]]))
    eps = EpsilonConfig(eps_v=0.1, beta=0.4)
    save_error_model(model, eps, tmp_path / "model.json", base_mva=10.0)
    loaded, loaded_eps = load_error_model(tmp_path / "model.json", base_mva=10.0)
    np.testing.assert_allclose(loaded.sigma, model.sigma)
    assert loaded.source_ids == ("W1", "W2")
    assert loaded_eps == eps


def test_scenario_csv_round_trip(tmp_path):
    model = ForecastErrorModel((Source("W1", 3), Source("W2", 5)), np.eye(2))
    scenarios = sample_scenarios(model, 20, seed=4, n_periods=2)
    save_scenarios(scenarios, tmp_path / "s.csv")
    loaded = load_scenarios(tmp_path / "s.csv", ("W1", "W2"))
    np.testing.assert_allclose(loaded.draws, scenarios.draws, rtol=1e-9)


def test_scenario_file_must_name_every_source(tmp_path):
    (tmp_path / "s.csv").write_text("W1\n0.1\n")
    with pytest.raises(UncertaintyError, match="W2"):
        load_scenarios(tmp_path / "s.csv", ("W1", "W2"))


def test_bundled_model_loads(bundled_paths):
    model, eps = load_error_model(bundled_paths[1])
    assert model.source_ids == ("W1", "W2")
    assert eps == EpsilonConfig()
    assert model.total_std() == pytest.approx(np.sqrt(0.04 + 0.0225 + 0.03))
