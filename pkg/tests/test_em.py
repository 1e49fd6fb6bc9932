import numpy as np
import pytest
from scipy import optimize

from jmhet.em import (_tau_bracket, e_step, em_iteration, fit, initial_params, make_cohort, q_survival,
                      q_tau, relative_change, update_alpha, update_baseline, update_beta,
                      update_gamma, update_sigma_theta, update_tau)
from jmhet.errors import LostPositiveDefiniteness
from jmhet.quadrature import gauss_hermite_rule, prior_log_ratio, rescale_grid
from jmhet.riskset import lookup_cumhaz
from jmhet.simulation import SimDesign, simulate_cohort


@pytest.fixture(scope="module")
def state(small_data, design):
    params = design.true_params()
    cohort = make_cohort(small_data)
    from conftest import breslow_baselines
    bl = breslow_baselines(small_data, params)
    cache = e_step(small_data, cohort, params, bl, rescale_grid(gauss_hermite_rule(8),
                                                                params.sigma))
    return small_data, cohort, params, bl, cache


def test_beta_maximises_expected_loglik(state):
    data, _, params, _, cache = state
    beta = update_beta(data, cache, params)
    neg = lambda b: -q_tau(data, _tau_bracket(data, cache, b), params.tau)
    ref = optimize.minimize(neg, params.beta, method="BFGS", options={"gtol": 1e-9}).x
    assert np.allclose(beta, ref, atol=1e-5)
    assert neg(beta) <= neg(ref) + 1e-9


def test_sigma_is_mean_second_moment(state):
    _, _, _, _, cache = state
    m = np.mean([cache.w[i] @ (cache.nodes[:, :, None] * cache.nodes[:, None, :])
                 .reshape(len(cache.nodes), -1) for i in range(len(cache.w))], axis=0)
    assert np.allclose(update_sigma_theta(cache), m.reshape(2, 2), rtol=1e-12)


def test_sigma_rejects_indefinite(state):
    cache = state[4]
    bad = type(cache)(**{**cache.__dict__, "E_theta2": -cache.E_theta2})
    with pytest.raises(LostPositiveDefiniteness):
        update_sigma_theta(bad)


def test_tau_intercept_only_closed_form(state):
    data, _, params, _, cache = state
    hom = data.homogeneous()
    p = params.copy()
    p.tau = np.array([0.0])
    bracket = _tau_bracket(hom, cache, p.beta)
    for _ in range(60):
        p.tau = update_tau(hom, cache, p)
    assert p.tau[0] == pytest.approx(np.log(bracket.mean()), abs=1e-10)


def test_tau_step_increases_q(state):
    data, _, params, _, cache = state
    p = params.copy()
    p.tau = p.tau + 0.3
    bracket = _tau_bracket(data, cache, p.beta)
    new = update_tau(data, cache, p)
    assert q_tau(data, bracket, new) >= q_tau(data, bracket, p.tau)


def test_breslow_matches_naive(state):
    data, cohort, params, _, cache = state
    got = update_baseline(cohort, cache, params, data.X2)
    for k in range(data.K):
        e = np.exp(data.X2 @ params.gamma[k]) * cache.exp_assoc(params.alpha[k])
        ev = np.unique(data.T[data.D == k + 1])[::-1]
        d = np.array([np.sum((data.T == t) & (data.D == k + 1)) for t in ev])
        s0 = np.array([e[data.T >= t].sum() for t in ev])
        assert np.allclose(got[k].times, ev)
        assert np.allclose(got[k].jumps, d / s0, rtol=1e-12)


@pytest.mark.parametrize("which", ["gamma", "alpha"])
def test_survival_steps_increase_q(state, which):
    data, cohort, params, _, cache = state
    bl = update_baseline(cohort, cache, params, data.X2)
    p = params.copy()
    p.gamma = p.gamma + 0.4
    p.alpha = p.alpha - 0.4
    for k in range(data.K):
        lam = lookup_cumhaz(bl[k], cohort, k)
        before = q_survival(data, cache, lam, k, p.gamma[k], p.alpha[k])
        if which == "gamma":
            g, a = update_gamma(data, cohort, cache, p, bl, k), p.alpha[k]
        else:
            g, a = p.gamma[k], update_alpha(data, cohort, cache, p, bl, k)
        assert q_survival(data, cache, lam, k, g, a) > before


def test_initial_values(small_data):
    params, bl = initial_params(small_data)
    assert np.allclose(params.alpha, 0.0)
    assert np.allclose(params.sigma, 0.1 * np.eye(2))
    assert len(bl) == small_data.K and all(np.all(b.jumps > 0) for b in bl)


def test_relative_change():
    assert relative_change(np.array([1.1, 0.0]), np.array([1.0, 0.0])) == pytest.approx(
        0.1 / 1.001)
    assert relative_change(np.zeros(0), np.zeros(0)) == 0.0


def test_em_step_ascends_on_fixed_grid(small_data):
    # With the nodes held where the E-step put them (prior ratio for the new
    # Sigma) each EM step is an exact ascent of the quadrature likelihood.
    cohort = make_cohort(small_data)
    rule = gauss_hermite_rule(10)
    params, bl = initial_params(small_data, cohort)
    grid = rescale_grid(rule, params.sigma)
    cache = e_step(small_data, cohort, params, bl, grid)
    for _ in range(40):
        new, bl = em_iteration(small_data, cohort, cache, params)
        lp = prior_log_ratio(grid, new.sigma, params.sigma)
        fixed = e_step(small_data, cohort, new, bl, grid, log_prior=lp).loglik
        assert fixed >= cache.loglik - 1e-12 * abs(cache.loglik)
        params, grid = new, rescale_grid(rule, new.sigma)
        cache = e_step(small_data, cohort, params, bl, grid)


def test_fit_ascends_and_converges(small_data):
    res = fit(small_data, se=False)
    tr = np.array(res.loglik_trace)
    assert res.converged and res.n_iter < small_data.spec.max_iter
    assert np.all(np.diff(tr) >= -1e-8 * np.abs(tr[:-1]))
    assert np.isfinite(res.params.vector()).all()


def test_fit_max_iter_flags_nonconvergence(small_data):
    res = fit(small_data, small_data.spec.replace(max_iter=1), se=False)
    assert not res.converged and res.n_iter == 1 and len(res.loglik_trace) == 2


def test_fit_from_truth(small_data, design):
    res = fit(small_data, init=design.true_params(), se=False)
    assert res.converged


def test_homogeneous_fit(medium_data):
    hom = medium_data.homogeneous()
    res = fit(hom, se=True)
    assert res.converged
    assert len(res.names) == hom.spec.n_params == 5 + 1 + 1 + 6 + 2
    assert np.all(np.isfinite(res.se))


def test_recovers_truth_large_n():
    d = SimDesign(n=1500, seed=5)
    res = fit(simulate_cohort(d), se=True)
    z = (res.params.vector() - d.true_params().vector()) / res.se
    assert np.max(np.abs(z)) < 4.0
