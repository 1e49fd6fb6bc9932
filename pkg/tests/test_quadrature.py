import numpy as np
import pytest
from jmhet.em import e_step, make_cohort, observed_loglik
from jmhet.errors import DegenerateDensity, NotPositiveDefinite
from jmhet.quadrature import (gauss_hermite_rule, normalise, posterior_expectations,
                              prior_log_ratio, rescale_grid)
from jmhet.simulation import simulate_cohort

from conftest import breslow_baselines
from oracles import adaptive_posterior


def test_closed_form_rules():
    r1 = gauss_hermite_rule(1)
    assert r1.abscissas[0] == 0.0 and r1.weights[0] == pytest.approx(np.sqrt(np.pi))
    r2 = gauss_hermite_rule(2)
    assert np.allclose(r2.abscissas, [-1 / np.sqrt(2), 1 / np.sqrt(2)])
    assert np.allclose(r2.weights, np.sqrt(np.pi) / 2)


@pytest.mark.parametrize("n_q", [3, 5, 10])
def test_prior_moments_exact(n_q):
    sigma = np.array([[0.5, 0.25], [0.25, 0.8]])
    g = rescale_grid(gauss_hermite_rule(n_q), sigma)
    w = np.exp(g.log_weights)
    assert w.sum() == pytest.approx(1.0, abs=1e-13)
    assert np.allclose(w @ g.nodes, 0.0, atol=1e-13)
    assert np.allclose(np.einsum("t,ti,tj->ij", w, g.nodes, g.nodes), sigma, atol=1e-13)


def test_rescale_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        rescale_grid(gauss_hermite_rule(5), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_normalise_degenerate():
    with pytest.raises(DegenerateDensity):
        normalise(np.full((1, 4), -np.inf))


def test_prior_ratio_zero_on_same_sigma():
    s = np.eye(2) * 0.5
    g = rescale_grid(gauss_hermite_rule(4), s)
    assert np.allclose(prior_log_ratio(g, s, s), 0.0)


@pytest.fixture(scope="module")
def oracle_case(design):
    data = simulate_cohort(design.replace(n=3))
    params = design.true_params()
    bl = breslow_baselines(data, params)
    refs = [adaptive_posterior(data.subject(i), params, bl, params.sigma) for i in range(data.n)]
    return data, params, bl, refs


# Prior-scaled rules converge slowly for long histories (narrow posteriors);
# 60 points per dimension resolve these fixtures to well below 1e-6.
ORACLE_POINTS = 60


def test_posterior_expectations_match_adaptive_oracle(oracle_case):
    data, params, bl, refs = oracle_case
    grid = rescale_grid(gauss_hermite_rule(ORACLE_POINTS), params.sigma)
    for i, ref in enumerate(refs):
        got = posterior_expectations(data.subject(i), params, bl, grid)
        assert np.allclose(got["theta"], ref["theta"], rtol=1e-6, atol=1e-9)
        assert got["theta2"][0, 1] == pytest.approx(ref["theta2_bw"], rel=1e-6)
        assert np.allclose(got["exp_assoc"], ref["exp_assoc"], rtol=1e-6)


def test_observed_loglik_matches_adaptive_oracle(oracle_case):
    data, params, bl, refs = oracle_case
    grid = rescale_grid(gauss_hermite_rule(ORACLE_POINTS), params.sigma)
    ll = observed_loglik(data, params, bl, grid)
    assert ll == pytest.approx(sum(r["log_marginal"] for r in refs), rel=1e-6)


def test_vectorised_estep_matches_single_subject(small_data, design):
    params = design.true_params()
    cohort = make_cohort(small_data)
    bl = breslow_baselines(small_data, params)
    grid = rescale_grid(gauss_hermite_rule(6), params.sigma)
    cache = e_step(small_data, cohort, params, bl, grid, max_cells=500)
    for i in (0, 17, 59):
        one = posterior_expectations(small_data.subject(i), params, bl, grid)
        sl = small_data.rows_of(i)
        assert cache.log_marginal[i] == pytest.approx(one["log_marginal"], rel=1e-12)
        assert np.allclose(cache.E_theta2[i], one["theta2"], rtol=1e-10)
        assert np.allclose(cache.E_bev[sl], one["b_exp_neg_vw"], rtol=1e-10)
        assert np.allclose(cache.E_bbev[sl], one["bb_exp_neg_vw"], rtol=1e-10)
        assert np.allclose(cache.exp_assoc(params.alpha[1])[i], one["exp_assoc"][1], rtol=1e-10)
    assert observed_loglik(small_data, params, bl, grid) == pytest.approx(cache.loglik)
