"""Standard errors from the profile likelihood.

The covariance of the parametric estimates is the inverse of the empirical
Fisher information, the sum over subjects of outer products of per-subject
profile score vectors.  Baseline hazards are profiled out through the
Breslow form, so the gamma/alpha scores contain risk-set terms; these are
assembled with the linear-scan kernels.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
from scipy.stats import norm

from .em import EStepCache, e_step, make_cohort
from .errors import SingularInformation, ZeroDenominator
from .model import BaselineHazard, Dataset, FitResult, Params, param_names, vech_indices
from .quadrature import QuadGrid, gauss_hermite_rule, prior_log_ratio, rescale_grid
from .riskset import SortedCohort, prefix_score_scan, riskset_sums


def _per_subject(data: Dataset, rowvals: np.ndarray) -> np.ndarray:
    return np.add.reduceat(rowvals, data.offsets[:-1], axis=0)


def score_beta_tau_sigma(data: Dataset, cache: EStepCache, params: Params):
    """Per-subject score blocks for beta, tau and vech(Sigma_theta)."""
    ewt = np.exp(-(data.W @ params.tau))
    r = data.y - data.X1 @ params.beta
    zb = np.einsum("ij,ij->i", data.Z, cache.E_bev)
    s_beta = _per_subject(data, data.X1 * (ewt * (r * cache.E_ev - zb))[:, None])

    zz = np.einsum("ij,ijk,ik->i", data.Z, cache.E_bbev, data.Z)
    bracket = r * r * cache.E_ev - 2.0 * r * zb + zz
    s_tau = _per_subject(data, data.W * (0.5 * (ewt * bracket - 1.0))[:, None])

    si = np.linalg.inv(params.sigma)
    a = np.einsum("ij,njk,kl->nil", si, cache.E_theta2, si)
    g = 0.5 * (a - si[None])
    eye = np.eye(si.shape[0])[None]
    m = 2.0 * g - g * eye
    rr, cc = vech_indices(si.shape[0])
    return s_beta, s_tau, m[:, rr, cc]


def _risk_pieces(data: Dataset, cohort: SortedCohort, cache: EStepCache,
                 params: Params, k: int):
    rt = cohort.risks[k]
    ea, eta_theta, _ = cache.assoc_moments(params.alpha[k])
    lin = np.exp(data.X2 @ params.gamma[k])
    e = lin * ea
    return rt, lin, e, lin[:, None] * eta_theta


def score_gamma_alpha(data: Dataset, cohort: SortedCohort, cache: EStepCache,
                      params: Params, k: int):
    """Per-subject profile score blocks for gamma_k and alpha_k (O(n))."""
    n, p2, q = data.n, data.spec.p2, params.alpha.shape[1]
    rt = cohort.risks[k]
    if rt.q == 0:
        return np.zeros((n, p2)), np.zeros((n, q))
    rt, lin, e, e_theta = _risk_pieces(data, cohort, cache, params, k)
    s0 = riskset_sums(cohort, k, e)
    if np.any(s0 <= 0):
        raise ZeroDenominator(f"empty weighted risk set for risk {k + 1}")
    s1g = riskset_sums(cohort, k, e[:, None] * data.X2)
    s1a = riskset_sums(cohort, k, e_theta)
    d = rt.counts.astype(float)
    lam = prefix_score_scan(cohort, k, d / s0)
    bg = prefix_score_scan(cohort, k, (d / s0**2)[:, None] * s1g)
    ba = prefix_score_scan(cohort, k, (d / s0**2)[:, None] * s1a)

    ev = data.D == k + 1
    j = rt.pos[ev]
    sg = e[:, None] * bg - data.X2 * (e * lam)[:, None]
    sa = e[:, None] * ba - e_theta * lam[:, None]
    sg[ev] += data.X2[ev] - s1g[j] / s0[j, None]
    sa[ev] += cache.E_theta[ev] - s1a[j] / s0[j, None]
    return sg, sa


def naive_score_gamma_alpha(data: Dataset, cache: EStepCache, params: Params, k: int):
    """Reference evaluation with explicit risk sets for every subject."""
    n, p2, q = data.n, data.spec.p2, params.alpha.shape[1]
    T, D = np.asarray(data.T), np.asarray(data.D)
    times = np.unique(T[D == k + 1])
    sg, sa = np.zeros((n, p2)), np.zeros((n, q))
    if len(times) == 0:
        return sg, sa
    ea, eta_theta, _ = cache.assoc_moments(params.alpha[k])
    lin = np.exp(data.X2 @ params.gamma[k])
    e = lin * ea
    e_theta = lin[:, None] * eta_theta

    def sums(t):
        at = T >= t
        return e[at].sum(), (e[at, None] * data.X2[at]).sum(axis=0), e_theta[at].sum(axis=0)

    stats = {t: sums(t) for t in times.tolist()}
    dcount = {t: int(np.sum((T == t) & (D == k + 1))) for t in times.tolist()}
    for i in range(n):
        if D[i] == k + 1:
            s0, s1g, s1a = stats[float(T[i])]
            sg[i] += data.X2[i] - s1g / s0
            sa[i] += cache.E_theta[i] - s1a / s0
        for t in times.tolist():
            if t > T[i]:
                continue
            s0, s1g, s1a = stats[t]
            dk = dcount[t]
            sg[i] += dk * s1g / s0**2 * e[i] - dk * e[i] * data.X2[i] / s0
            sa[i] += dk * s1a / s0**2 * e[i] - dk * e_theta[i] / s0
    return sg, sa


def score_matrix(data: Dataset, cohort: SortedCohort, cache: EStepCache,
                 params: Params) -> np.ndarray:
    """Per-subject score vectors, columns in :func:`param_names` order."""
    sb, st, ss = score_beta_tau_sigma(data, cache, params)
    g_blocks, a_blocks = [], []
    for k in range(data.K):
        sg, sa = score_gamma_alpha(data, cohort, cache, params, k)
        g_blocks.append(sg)
        a_blocks.append(sa)
    return np.hstack([sb, st, ss] + g_blocks + a_blocks)


def empirical_fisher(scores: np.ndarray, names=None) -> np.ndarray:
    """Inverse of the summed outer products of per-subject scores."""
    info = scores.T @ scores
    vals, vecs = np.linalg.eigh(info)
    scale = max(vals.max(initial=0.0), 1e-300)
    bad = vals <= 1e-12 * scale
    if np.any(bad):
        dirs = vecs[:, bad].T
        desc = ""
        if names is not None:
            top = [names[int(np.argmax(np.abs(v)))] for v in dirs]
            desc = f" (dominant parameters: {', '.join(top)})"
        raise SingularInformation(
            f"empirical Fisher information is rank deficient{desc}", dirs)
    cov = (vecs / vals) @ vecs.T
    return 0.5 * (cov + cov.T)


def final_cache(data: Dataset, fit: FitResult) -> tuple[SortedCohort, EStepCache]:
    cohort = fit.extra.get("cohort") or make_cohort(data)
    cache = fit.extra.get("cache")
    if cache is None:
        grid = rescale_grid(gauss_hermite_rule(fit.spec.quad_points), fit.params.sigma)
        cache = e_step(data, cohort, fit.params, fit.baselines, grid)
    return cohort, cache


def standard_errors(data: Dataset, fit: FitResult) -> np.ndarray:
    cohort, cache = final_cache(data, fit)
    scores = score_matrix(data, cohort, cache, fit.params)
    return empirical_fisher(scores, param_names(fit.spec))


def se_table(fit: FitResult) -> pd.DataFrame:
    est = fit.params.vector()
    se = fit.se if fit.se is not None else np.full(len(est), np.nan)
    z = est / se
    return pd.DataFrame({
        "parameter": fit.names, "estimate": est, "se": se,
        "ci_lo": est - 1.96 * se, "ci_hi": est + 1.96 * se,
        "z": z, "p": 2.0 * norm.sf(np.abs(z)),
    })


# -- finite-difference reference ---------------------------------------------

def profile_loglik_subjects(data: Dataset, cohort: SortedCohort, ref_cache: EStepCache,
                            ref_grid: QuadGrid, ref_sigma: np.ndarray,
                            params: Params) -> np.ndarray:
    """Per-subject log-likelihood with the baselines profiled in one Breslow pass.

    Posterior expectations inside the Breslow denominators are held at the
    reference posterior, and the quadrature nodes stay at ``ref_grid`` with an
    importance correction for a changed ``Sigma_theta``.  At the reference
    point the gradient of this function is the profile score.
    """
    baselines = []
    for k, rt in enumerate(cohort.risks):
        if rt.q == 0:
            baselines.append(BaselineHazard.empty())
            continue
        e = np.exp(data.X2 @ params.gamma[k]) * ref_cache.exp_assoc(params.alpha[k])
        s0 = riskset_sums(cohort, k, e)
        baselines.append(BaselineHazard(rt.times, rt.counts / s0, rt.counts))
    lp = prior_log_ratio(ref_grid, params.sigma, ref_sigma)
    return e_step(data, cohort, params, baselines, ref_grid, log_prior=lp).log_marginal


def finite_difference_scores(data: Dataset, fit: FitResult, rel_step: float = 1e-5):
    """Central differences of :func:`profile_loglik_subjects`, per subject."""
    cohort, cache = final_cache(data, fit)
    grid = rescale_grid(gauss_hermite_rule(fit.spec.quad_points), fit.params.sigma)
    base = fit.params.vector()
    out = np.empty((data.n, len(base)))
    for p in range(len(base)):
        h = rel_step * max(1.0, abs(base[p]))
        vals = []
        for sgn in (1.0, -1.0):
            v = base.copy()
            v[p] += sgn * h
            pp = Params.from_vector(v, fit.spec)
            vals.append(profile_loglik_subjects(data, cohort, cache, grid,
                                                fit.params.sigma, pp))
        out[:, p] = (vals[0] - vals[1]) / (2.0 * h)
    return out
