"""EM estimation of the joint model.

Each iteration runs a vectorised E-step over the quadrature grid, then the
M-step in the order: baseline hazards (Breslow form), beta, Sigma_theta
(closed forms), followed by one guarded Newton step each for tau, gamma_k
and alpha_k.  Guarded means the step is halved until the corresponding part
of the expected complete-data log-likelihood does not decrease.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    LostPositiveDefiniteness,
    NonFiniteLoglik,
    SingularGram,
    SingularInformation,
    ZeroDenominator,
)
from .model import BaselineHazard, Dataset, FitResult, ModelSpec, Params
from .quadrature import (
    QuadGrid,
    gauss_hermite_rule,
    longitudinal_terms,
    normalise,
    rescale_grid,
    survival_terms,
)
from .riskset import SortedCohort, build_cohort, lookup_cumhaz, riskset_sums

log = logging.getLogger(__name__)

MAX_CELLS = 2_000_000


@dataclass
class EStepCache:
    """Posterior quantities for every subject under the current parameters.

    Row-level arrays (``E_ev``, ``E_bev``, ``E_bbev``) hold
    ``E[exp(-V omega)]``, ``E[b exp(-V omega)]`` and
    ``E[b b' exp(-V omega)]`` for each longitudinal row.
    """

    w: np.ndarray
    nodes: np.ndarray
    log_marginal: np.ndarray
    E_theta: np.ndarray
    E_theta2: np.ndarray
    E_ev: np.ndarray
    E_bev: np.ndarray
    E_bbev: np.ndarray

    @property
    def loglik(self) -> float:
        return float(self.log_marginal.sum())

    def assoc_moments(self, alpha_k: np.ndarray):
        """E[e^{a'theta}], E[theta e^{a'theta}], E[theta theta' e^{a'theta}]."""
        ea = np.exp(self.nodes @ alpha_k)
        we = self.w * ea[None, :]
        q = self.nodes.shape[1]
        nn = (self.nodes[:, :, None] * self.nodes[:, None, :]).reshape(-1, q * q)
        return we.sum(axis=1), we @ self.nodes, (we @ nn).reshape(-1, q, q)

    def exp_assoc(self, alpha_k: np.ndarray) -> np.ndarray:
        return self.w @ np.exp(self.nodes @ alpha_k)


def make_cohort(data: Dataset) -> SortedCohort:
    return build_cohort(data.T, data.D, data.K)


def baseline_at_obs(cohort: SortedCohort, baselines: list[BaselineHazard]):
    """Lambda_0k(T_i) for all i, k and the log jump of the observed cause."""
    n, K = cohort.n, cohort.K
    cumhaz = np.zeros((n, K))
    log_jump = np.zeros(n)
    for k in range(K):
        cumhaz[:, k] = lookup_cumhaz(baselines[k], cohort, k)
        ev = cohort.D == k + 1
        if np.any(ev):
            ext = np.concatenate([baselines[k].jumps, [0.0]])
            jump = ext[cohort.risks[k].pos[ev]]
            with np.errstate(divide="ignore"):
                log_jump[ev] = np.log(jump)
    return cumhaz, log_jump


def _chunks(offsets: np.ndarray, G: int, max_cells: int):
    n = len(offsets) - 1
    limit = max(max_cells // max(G, 1), 1)
    s0 = 0
    while s0 < n:
        s1 = int(np.searchsorted(offsets, offsets[s0] + limit, side="right")) - 1
        s1 = min(max(s1, s0 + 1), n)
        yield s0, s1
        s0 = s1


def e_step(data: Dataset, cohort: SortedCohort, params: Params,
           baselines: list[BaselineHazard], grid: QuadGrid,
           log_prior: np.ndarray | None = None,
           max_cells: int = MAX_CELLS) -> EStepCache:
    nodes = grid.nodes
    G, q = nodes.shape
    q_b = data.spec.q_b
    B = nodes[:, :q_b]
    BB = (B[:, :, None] * B[:, None, :]).reshape(G, q_b * q_b)
    cumhaz, log_jump = baseline_at_obs(cohort, baselines)
    logw = grid.log_weights if log_prior is None else grid.log_weights + log_prior
    surv = survival_terms(data.D, data.X2, params, cumhaz, log_jump, nodes)
    surv += logw[None, :]

    n, N = data.n, data.n_rows
    w = np.empty((n, G))
    logm = np.empty(n)
    E_ev = np.empty(N)
    E_bev = np.empty((N, q_b))
    E_bbev = np.empty((N, q_b, q_b))
    off = data.offsets
    for s0, s1 in _chunks(off, G, max_cells):
        r0, r1 = int(off[s0]), int(off[s1])
        ll, ev, _ = longitudinal_terms(data.y[r0:r1], data.X1[r0:r1], data.Z[r0:r1],
                                       data.W[r0:r1], data.V[r0:r1], params, nodes)
        logj = np.add.reduceat(ll, off[s0:s1] - r0, axis=0) + surv[s0:s1]
        wc, lm = normalise(logj)
        w[s0:s1] = wc
        logm[s0:s1] = lm
        wr = wc[data.row_subject[r0:r1] - s0] * ev
        E_ev[r0:r1] = wr.sum(axis=1)
        E_bev[r0:r1] = wr @ B
        E_bbev[r0:r1] = (wr @ BB).reshape(-1, q_b, q_b)
    nn = (nodes[:, :, None] * nodes[:, None, :]).reshape(G, q * q)
    return EStepCache(w=w, nodes=nodes, log_marginal=logm, E_theta=w @ nodes,
                      E_theta2=(w @ nn).reshape(n, q, q), E_ev=E_ev, E_bev=E_bev,
                      E_bbev=E_bbev)


def observed_loglik(data: Dataset, params: Params, baselines: list[BaselineHazard],
                    grid: QuadGrid, cohort: SortedCohort | None = None) -> float:
    cohort = cohort if cohort is not None else make_cohort(data)
    cache = e_step(data, cohort, params, baselines, grid)
    ll = cache.loglik
    if not np.isfinite(ll):
        raise NonFiniteLoglik("observed log-likelihood is not finite")
    return ll


# -- closed-form updates -----------------------------------------------------

def update_beta(data: Dataset, cache: EStepCache, params: Params) -> np.ndarray:
    winv = np.exp(-(data.W @ params.tau)) * cache.E_ev
    gram = (data.X1 * winv[:, None]).T @ data.X1
    zb = np.einsum("ij,ij->i", data.Z, cache.E_bev)
    rhs = data.X1.T @ (np.exp(-(data.W @ params.tau)) * (data.y * cache.E_ev - zb))
    try:
        c = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise SingularGram("weighted Gram matrix of X1 is singular") from None
    return np.linalg.solve(c.T, np.linalg.solve(c, rhs))


def update_sigma_theta(cache: EStepCache) -> np.ndarray:
    m = cache.E_theta2.mean(axis=0)
    m = 0.5 * (m + m.T)
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise LostPositiveDefiniteness(
            "Sigma_theta update lost positive definiteness; "
            "increase the number of quadrature points") from None
    return m


def update_baseline(cohort: SortedCohort, cache: EStepCache, params: Params,
                    X2: np.ndarray) -> list[BaselineHazard]:
    out = []
    for k, rt in enumerate(cohort.risks):
        if rt.q == 0:
            out.append(BaselineHazard.empty())
            continue
        e = np.exp(X2 @ params.gamma[k]) * cache.exp_assoc(params.alpha[k])
        s0 = riskset_sums(cohort, k, e)
        if np.any(s0 <= 0) or not np.all(np.isfinite(s0)):
            raise ZeroDenominator(f"empty weighted risk set for risk {k + 1}")
        out.append(BaselineHazard(rt.times, rt.counts / s0, rt.counts))
    return out


# -- Newton updates ----------------------------------------------------------

def _guarded_newton(x: np.ndarray, U: np.ndarray, I: np.ndarray,
                    qfun: Callable[[np.ndarray], float],
                    max_halvings: int = 10) -> np.ndarray:
    try:
        c = np.linalg.cholesky(I)
        step = np.linalg.solve(c.T, np.linalg.solve(c, U))
    except np.linalg.LinAlgError:
        try:
            step = np.linalg.solve(I, U)
        except np.linalg.LinAlgError:
            raise SingularInformation("information matrix is singular") from None
    q0 = qfun(x)
    s = 1.0
    for _ in range(max_halvings + 1):
        xn = x + s * step
        qn = qfun(xn)
        if np.isfinite(qn) and qn >= q0:
            return xn
        s *= 0.5
    return x


def _tau_bracket(data: Dataset, cache: EStepCache, beta: np.ndarray) -> np.ndarray:
    """E[(y - X1 beta - Z b)^2 exp(-V omega)] per row."""
    r = data.y - data.X1 @ beta
    zb = np.einsum("ij,ij->i", data.Z, cache.E_bev)
    zz = np.einsum("ij,ijk,ik->i", data.Z, cache.E_bbev, data.Z)
    return r * r * cache.E_ev - 2.0 * r * zb + zz


def q_tau(data: Dataset, bracket: np.ndarray, tau: np.ndarray) -> float:
    wt = data.W @ tau
    return float(np.sum(-0.5 * wt - 0.5 * np.exp(-wt) * bracket))


def tau_score_info(data: Dataset, bracket: np.ndarray, tau: np.ndarray):
    g = np.exp(-(data.W @ tau)) * bracket
    U = data.W.T @ (0.5 * (g - 1.0))
    I = (data.W * (0.5 * g)[:, None]).T @ data.W
    return U, I


def update_tau(data: Dataset, cache: EStepCache, params: Params) -> np.ndarray:
    """One guarded Newton step; ``params.beta`` must already be updated."""
    bracket = _tau_bracket(data, cache, params.beta)
    U, I = tau_score_info(data, bracket, params.tau)
    return _guarded_newton(params.tau, U, I, lambda t: q_tau(data, bracket, t))


def q_survival(data: Dataset, cache: EStepCache, cumhaz_k: np.ndarray, k: int,
               gamma_k: np.ndarray, alpha_k: np.ndarray) -> float:
    ev = data.D == k + 1
    lin = data.X2 @ gamma_k
    # trial Newton steps may overflow; the guard rejects non-finite values
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.sum(lin[ev]) + np.sum(cache.E_theta[ev] @ alpha_k)
                     - np.sum(cumhaz_k * np.exp(lin) * cache.exp_assoc(alpha_k)))


def gamma_score_info(data: Dataset, cache: EStepCache, cumhaz_k: np.ndarray,
                     k: int, gamma_k: np.ndarray, alpha_k: np.ndarray):
    ev = data.D == k + 1
    e = cumhaz_k * np.exp(data.X2 @ gamma_k) * cache.exp_assoc(alpha_k)
    U = data.X2[ev].sum(axis=0) - data.X2.T @ e
    I = (data.X2 * e[:, None]).T @ data.X2
    return U, I


def alpha_score_info(data: Dataset, cache: EStepCache, cumhaz_k: np.ndarray,
                     k: int, gamma_k: np.ndarray, alpha_k: np.ndarray):
    ev = data.D == k + 1
    _, e1, e2 = cache.assoc_moments(alpha_k)
    f = cumhaz_k * np.exp(data.X2 @ gamma_k)
    U = cache.E_theta[ev].sum(axis=0) - f @ e1
    I = np.einsum("i,ijk->jk", f, e2)
    return U, I


def update_gamma(data: Dataset, cohort: SortedCohort, cache: EStepCache,
                 params: Params, baselines: list[BaselineHazard], k: int) -> np.ndarray:
    """Newton step for gamma_k with the already updated baseline of risk k.

    The sums over event times t_kj <= T_i collapse to Lambda_0k(T_i) because
    the summands do not depend on time.
    """
    if cohort.risks[k].q == 0 or data.spec.p2 == 0:
        return params.gamma[k].copy()
    lam = lookup_cumhaz(baselines[k], cohort, k)
    a = params.alpha[k]
    U, I = gamma_score_info(data, cache, lam, k, params.gamma[k], a)
    return _guarded_newton(params.gamma[k], U, I,
                           lambda g: q_survival(data, cache, lam, k, g, a))


def update_alpha(data: Dataset, cohort: SortedCohort, cache: EStepCache,
                 params: Params, baselines: list[BaselineHazard], k: int) -> np.ndarray:
    if cohort.risks[k].q == 0:
        return params.alpha[k].copy()
    lam = lookup_cumhaz(baselines[k], cohort, k)
    g = params.gamma[k]
    U, I = alpha_score_info(data, cache, lam, k, g, params.alpha[k])
    return _guarded_newton(params.alpha[k], U, I,
                           lambda a: q_survival(data, cache, lam, k, g, a))


# -- initial values ----------------------------------------------------------

def _point_cache(data: Dataset, q: int) -> EStepCache:
    """Cache of a posterior concentrated at theta = 0."""
    n, N, q_b = data.n, data.n_rows, data.spec.q_b
    return EStepCache(w=np.ones((n, 1)), nodes=np.zeros((1, q)),
                      log_marginal=np.zeros(n), E_theta=np.zeros((n, q)),
                      E_theta2=np.zeros((n, q, q)), E_ev=np.ones(N),
                      E_bev=np.zeros((N, q_b)), E_bbev=np.zeros((N, q_b, q_b)))


def initial_params(data: Dataset, cohort: SortedCohort | None = None,
                   cox_iter: int = 50) -> tuple[Params, list[BaselineHazard]]:
    """Starting values ignoring the random effects.

    beta by least squares, tau with only its intercept (log mean squared
    residual), Sigma_theta = 0.1 I, gamma_k from a Cox fit with alpha = 0.
    """
    spec = data.spec
    cohort = cohort if cohort is not None else make_cohort(data)
    beta, *_ = np.linalg.lstsq(data.X1, data.y, rcond=None)
    r = data.y - data.X1 @ beta
    target = np.log(np.mean(r * r))
    const = np.flatnonzero(np.all(data.W == data.W[:1], axis=0) & (data.W[0] != 0))
    tau = np.zeros(spec.p_w)
    if len(const):
        tau[const[0]] = target / data.W[0, const[0]]
    elif spec.p_w:
        tau, *_ = np.linalg.lstsq(data.W, np.full(data.n_rows, target), rcond=None)
    params = Params(beta, tau, np.zeros((spec.K, spec.p2)), np.zeros((spec.K, spec.q)),
                    0.1 * np.eye(spec.q))
    cache = _point_cache(data, spec.q)
    for _ in range(cox_iter):
        baselines = update_baseline(cohort, cache, params, data.X2)
        old = params.gamma.copy()
        for k in range(spec.K):
            params.gamma[k] = update_gamma(data, cohort, cache, params, baselines, k)
        if np.max(np.abs(params.gamma - old), initial=0.0) < 1e-10:
            break
    baselines = update_baseline(cohort, cache, params, data.X2)
    return params, baselines


# -- driver ------------------------------------------------------------------

def relative_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.max(np.abs(new - old) / (np.abs(old) + 1e-3), initial=0.0))


def em_iteration(data: Dataset, cohort: SortedCohort, cache: EStepCache,
                 params: Params) -> tuple[Params, list[BaselineHazard]]:
    """One M-step given the E-step cache of ``params``."""
    K = data.K
    baselines = update_baseline(cohort, cache, params, data.X2)
    new = params.copy()
    new.beta = update_beta(data, cache, params)
    new.sigma = update_sigma_theta(cache)
    new.tau = update_tau(data, cache, new)
    for k in range(K):
        new.gamma[k] = update_gamma(data, cohort, cache, new, baselines, k)
    for k in range(K):
        new.alpha[k] = update_alpha(data, cohort, cache, new, baselines, k)
    return new, baselines


def fit(data: Dataset, spec: ModelSpec | None = None, init: Params | None = None,
        callback: Callable[[dict], None] | None = None, se: bool = True) -> FitResult:
    """Fit the joint model by EM.

    Stops when the largest relative parameter change is below
    ``spec.tol_param`` and the relative log-likelihood change is below
    ``spec.tol_loglik``, or after ``spec.max_iter`` iterations.
    """
    spec = spec or data.spec
    t0 = time.perf_counter()
    cohort = make_cohort(data)
    rule = gauss_hermite_rule(spec.quad_points)
    if init is None:
        params, baselines = initial_params(data, cohort)
    else:
        params = init.copy()
        params.check()
        baselines = update_baseline(cohort, e_step_point(data, cohort, params, rule),
                                    params, data.X2)
    cache = e_step(data, cohort, params, baselines, rescale_grid(rule, params.sigma))
    trace = [cache.loglik]
    if not np.isfinite(trace[0]):
        raise NonFiniteLoglik("initial log-likelihood is not finite", trace)
    converged = False
    it = 0
    for it in range(1, spec.max_iter + 1):
        new, baselines_new = em_iteration(data, cohort, cache, params)
        cache_new = e_step(data, cohort, new, baselines_new, rescale_grid(rule, new.sigma))
        ll = cache_new.loglik
        if not np.isfinite(ll):
            trace.append(ll)
            raise NonFiniteLoglik(f"log-likelihood became non-finite at iteration {it}", trace)
        dpar = relative_change(new.vector(), params.vector())
        dll = abs(ll - trace[-1]) / max(abs(trace[-1]), 1e-300)
        trace.append(ll)
        params, baselines, cache = new, baselines_new, cache_new
        if callback is not None:
            callback({"iteration": it, "loglik": ll, "max_param_delta": dpar})
        if dpar < spec.tol_param and dll < spec.tol_loglik:
            converged = True
            break
    runtime = {"em_seconds": time.perf_counter() - t0}
    result = FitResult(spec=spec, params=params, baselines=baselines,
                       loglik_trace=trace, n_iter=it, converged=converged,
                       subject_ids=data.subject_ids, posterior_means=cache.E_theta,
                       runtime=runtime, extra={"cache": cache, "cohort": cohort})
    if se:
        from .inference import standard_errors

        t1 = time.perf_counter()
        result.cov = standard_errors(data, result)
        runtime["se_seconds"] = time.perf_counter() - t1
    return result


def e_step_point(data: Dataset, cohort: SortedCohort, params: Params, rule) -> EStepCache:
    """Prior-only expectations, used for the first Breslow pass from user starts.

    Only ``w`` and the theta moments are meaningful; the row-level entries
    are placeholders.
    """
    grid = rescale_grid(rule, params.sigma)
    n, N, q_b = data.n, data.n_rows, data.spec.q_b
    nodes = grid.nodes
    G = grid.size
    w = np.tile(np.exp(grid.log_weights), (n, 1))
    nn = (nodes[:, :, None] * nodes[:, None, :]).reshape(G, -1)
    q = nodes.shape[1]
    return EStepCache(w=w, nodes=nodes, log_marginal=np.zeros(n), E_theta=w @ nodes,
                      E_theta2=(w @ nn).reshape(n, q, q), E_ev=np.ones(N),
                      E_bev=np.zeros((N, q_b)), E_bbev=np.zeros((N, q_b, q_b)))
