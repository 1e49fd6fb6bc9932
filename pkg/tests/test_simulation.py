import numpy as np
import pandas as pd
import pytest
from scipy import special, stats

from jmhet.errors import EmptyGroup, InsufficientRiskSet
from jmhet.model import HETEROGENEOUS, HOMOGENEOUS
from jmhet.simulation import (SimDesign, cohort_frames, empirical_cif, fold_assignment,
                              fold_mape, make_rng, mape_cv, monte_carlo_study,
                              quartile_groups, simulate_arrays, simulate_cohort, true_values)


def test_random_effect_moments():
    d = SimDesign(n=200_000)
    th = simulate_arrays(d, make_rng(3))["theta"]
    assert np.var(th[:, 1]) == pytest.approx(d.sigma_w2, rel=0.02)
    assert np.cov(th.T)[0, 1] == pytest.approx(d.sigma[0, 1], rel=0.05)


def test_log_variance_residual():
    # log(e^2) - log sigma^2 - omega is log chi^2_1: mean digamma(1/2) + log 2, var pi^2/2
    d = SimDesign(n=20_000)
    a = simulate_arrays(d, make_rng(4))
    th = a["theta"][a["row_subject"]]
    resid = a["y"] - a["X1"] @ np.asarray(d.beta) - th[:, 0]
    z = np.log(resid ** 2) - a["X1"] @ np.asarray(d.tau) - th[:, 1]
    se = np.sqrt(np.pi ** 2 / 2 / len(z))
    assert abs(z.mean() - (special.digamma(0.5) + np.log(2))) < 4 * se
    assert np.var(z) == pytest.approx(np.pi ** 2 / 2, rel=0.02)


def test_inversion_gives_exponential_times():
    d = SimDesign(n=20_000, gamma=((0, 0, 0), (0, 0, 0)), alpha_b=(0, 0), alpha_w=(0, 0),
                  censor=(1e6, 1e6 + 1))
    a = simulate_arrays(d, make_rng(5))
    rate = sum(d.lambda0)
    assert stats.kstest(a["T"], "expon", args=(0, 1 / rate)).pvalue > 0.01
    assert np.mean(a["D"] == 1) == pytest.approx(d.lambda0[0] / rate, abs=0.015)


def test_visits_stop_at_event_time():
    a = simulate_arrays(SimDesign(n=500), make_rng(6))
    assert np.all(a["time"] <= a["T"][a["row_subject"]])
    assert np.allclose(a["time"] / 0.25, np.round(a["time"] / 0.25))
    assert np.all(np.bincount(a["row_subject"], minlength=500) >= 1)


def test_simulation_deterministic():
    d = SimDesign(n=100)
    a, b = simulate_cohort(d, make_rng(9)), simulate_cohort(d, make_rng(9))
    assert np.array_equal(a.y, b.y) and np.array_equal(a.T, b.T)
    c = simulate_cohort(d, make_rng(9, 1))
    assert not np.array_equal(a.T, c.T)


def test_cohort_frames_roundtrip():
    data = simulate_cohort(SimDesign(n=30))
    long, surv = cohort_frames(data)
    assert len(long) == data.n_rows and len(surv) == data.n
    assert list(surv.columns[:3]) == ["id", "obs_time", "status"]


def test_true_values():
    d = SimDesign()
    names = ["beta_0", "tau_0", "alpha_b2"]
    assert np.allclose(true_values(d, names, HETEROGENEOUS), [5.0, 0.5, -1.0])
    assert np.isnan(true_values(d, names, HOMOGENEOUS)[1])


# -- empirical CIF ----------------------------------------------------------

def test_empirical_cif_uncensored_is_fraction():
    rng = np.random.default_rng(0)
    T = rng.exponential(3.0, 300)
    D = rng.integers(1, 3, 300)
    s = 1.0
    for u in (2.0, 4.0, 9.0):
        frac = np.sum((T > s) & (T <= u) & (D == 2)) / np.sum(T > s)
        assert empirical_cif(T, D, s, [u], 2)[0] == pytest.approx(frac, abs=1e-12)


def test_empirical_cif_single_risk_is_one_minus_km():
    rng = np.random.default_rng(1)
    T = np.round(rng.exponential(3.0, 200), 1) + 0.1
    D = (rng.random(200) < 0.7).astype(int)
    s, u = 0.5, 4.0
    alive = T > s
    km = 1.0
    for t in np.unique(T[alive & (D == 1) & (T <= u)]):
        km *= 1 - np.sum(alive & (T == t) & (D == 1)) / np.sum(alive & (T >= t))
    assert empirical_cif(T, D, s, [u], 1)[0] == pytest.approx(1 - km, abs=1e-12)


def test_empirical_cif_trivial_cases():
    assert np.all(empirical_cif([5.0, 6.0], [0, 0], 1.0, [7.0], 1) == 0)
    assert empirical_cif([2.0], [1], 1.0, [1.5, 3.0], 1).tolist() == [0.0, 1.0]
    with pytest.raises(EmptyGroup):
        empirical_cif([1.0, 0.5], [1, 1], 2.0, [3.0], 1)


# -- MAPE -------------------------------------------------------------------

def test_quartile_groups_stable():
    g = quartile_groups(np.array([0.3, 0.1, 0.1, 0.2, 0.5, 0.4, 0.1, 0.0]))
    assert [x.tolist() for x in g] == [[7, 1], [2, 6], [3, 0], [5, 4]]


def test_perfect_predictor_has_zero_mape():
    rng = np.random.default_rng(2)
    T, D, pred = [], [], []
    for g in range(4):
        t = rng.exponential(2.0 + g, 25) + 1.0
        d = rng.integers(1, 3, 25)
        T.append(t)
        D.append(d)
        pred.append(np.full(25, empirical_cif(t, d, 1.0, [3.0], 1)[0] + 1e-9 * g))
    T, D, pred = map(np.concatenate, (T, D, pred))
    assert len(set(np.round(pred, 12))) == 4
    assert fold_mape(pred, T, D, 1.0, 3.0, 1) == pytest.approx(0.0, abs=1e-8)


def test_mape_relabelling_invariant():
    rng = np.random.default_rng(3)
    T = rng.exponential(3.0, 80) + 1.0
    D = rng.integers(0, 3, 80)
    pred = rng.random(80)
    perm = rng.permutation(80)
    assert fold_mape(pred, T, D, 1.0, 4.0, 2) == pytest.approx(
        fold_mape(pred[perm], T[perm], D[perm], 1.0, 4.0, 2), abs=1e-14)


def test_mape_needs_four_subjects():
    with pytest.raises(InsufficientRiskSet):
        fold_mape([0.1, 0.2, 0.3], [2.0, 3.0, 4.0], [1, 1, 1], 1.0, 5.0, 1)


def test_fold_assignment():
    a = fold_assignment(103, 4, make_rng(0))
    assert np.array_equal(a, fold_assignment(103, 4, make_rng(0)))
    counts = np.bincount(a)
    assert counts.sum() == 103 and counts.max() - counts.min() <= 1


# -- harnesses --------------------------------------------------------------

def test_monte_carlo_smoke():
    rep = monte_carlo_study(SimDesign(n=200), 2, seed=4)
    tab = rep.table
    assert set(tab.config) == {HETEROGENEOUS, HOMOGENEOUS}
    assert len(tab[tab.config == HETEROGENEOUS]) == 23
    assert len(tab[tab.config == HOMOGENEOUS]) == 15
    assert tab.loc[tab.config == HOMOGENEOUS, "true"].isna().sum() == 1
    text = rep.to_text()
    assert text.startswith("Monte Carlo replicates: 2") and "alpha_b2" in text
    assert len(rep.replicates) == 4


def test_monte_carlo_thread_invariant():
    a = monte_carlo_study(SimDesign(n=150), 2, configs=(HOMOGENEOUS,), seed=8)
    b = monte_carlo_study(SimDesign(n=150), 2, configs=(HOMOGENEOUS,), seed=8, threads=2)
    pd.testing.assert_frame_equal(a.table, b.table)


def test_mape_cv_shape():
    data = simulate_cohort(SimDesign(n=400), make_rng(12))
    table, folds = mape_cv(data, folds=2, seed=1)
    assert len(table) == 2 * 2 * 3
    assert list(table.columns) == ["config", "risk", "u", "mape", "folds_not_converged"]
    assert len(folds) == 2 * len(table)
    assert np.all((table.mape >= 0) & (table.mape <= 1))
