"""Gauss-Hermite rules and posterior expectations over the random effects.

Integrals against the N(0, Sigma) prior are evaluated on the tensor grid
``theta_t`` of a Gauss-Hermite rule (weight ``exp(-x^2)``), mapped to
``sqrt(2) L theta_t`` with ``L`` the lower Cholesky factor of Sigma.  With
that map the prior density times ``exp(|theta_t|^2)`` is constant over the
grid, so

    E[g(theta)] = pi^(-q/2) * sum_t w_t g(sqrt(2) L theta_t).

Every likelihood factor is accumulated in log space and normalised with a
per-subject max shift.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .errors import DegenerateDensity, NotPositiveDefinite
from .model import BaselineHazard, Params, SubjectData

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussHermiteRule:
    abscissas: np.ndarray
    weights: np.ndarray

    @property
    def order(self) -> int:
        return len(self.abscissas)


def gauss_hermite_rule(n_q: int) -> GaussHermiteRule:
    if n_q < 1:
        raise ValueError("n_q must be >= 1")
    x, w = hermgauss(n_q)
    # hermgauss leaves roundoff asymmetry around zero
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    return GaussHermiteRule(x, w)


@dataclass(frozen=True)
class QuadGrid:
    """Tensor-product grid rescaled to a prior covariance.

    Attributes
    ----------
    std_nodes : ndarray, shape (G, q)
        Product abscissas ``theta_t``.
    log_weights : ndarray, shape (G,)
        ``log(w_t) - (q/2) log(pi)``; ``exp`` of it sums to one.
    nodes : ndarray, shape (G, q)
        Rescaled abscissas ``sqrt(2) L theta_t``.
    chol : ndarray, shape (q, q)
        Lower Cholesky factor of the covariance.
    """

    std_nodes: np.ndarray
    log_weights: np.ndarray
    nodes: np.ndarray
    chol: np.ndarray

    @property
    def size(self) -> int:
        return len(self.log_weights)

    @property
    def q(self) -> int:
        return self.nodes.shape[1]


def rescale_grid(rule: GaussHermiteRule, sigma_theta: np.ndarray) -> QuadGrid:
    sigma_theta = np.atleast_2d(np.asarray(sigma_theta, dtype=float))
    q = sigma_theta.shape[0]
    try:
        L = np.linalg.cholesky(sigma_theta) if q else np.zeros((0, 0))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("sigma_theta is not positive definite") from exc
    idx = np.array(list(itertools.product(range(rule.order), repeat=q)), dtype=int)
    idx = idx.reshape(-1, q)
    std = rule.abscissas[idx]
    logw = np.log(rule.weights)[idx].sum(axis=1) - 0.5 * q * np.log(np.pi)
    nodes = np.sqrt(2.0) * std @ L.T
    return QuadGrid(std, logw, nodes, L)


def log_normal_density(theta: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Row-wise log N(theta; 0, sigma)."""
    q = sigma.shape[0]
    L = np.linalg.cholesky(sigma)
    z = np.linalg.solve(L, theta.T)
    return (-0.5 * q * LOG_2PI - np.log(np.diag(L)).sum()
            - 0.5 * np.sum(z * z, axis=0))


def prior_log_ratio(grid: QuadGrid, sigma_new: np.ndarray,
                    sigma_grid: np.ndarray) -> np.ndarray:
    """Importance correction to reuse ``grid`` for a different prior."""
    return (log_normal_density(grid.nodes, sigma_new)
            - log_normal_density(grid.nodes, sigma_grid))


# -- log-likelihood pieces ---------------------------------------------------

def longitudinal_terms(y, X1, Z, W, V, params: Params, nodes: np.ndarray):
    """Per-row quantities on the grid.

    Returns ``(loglik, ev, resid)`` where ``loglik[j, t]`` is the log normal
    density of row ``j`` at node ``t``, ``ev[j, t] = exp(-V_j omega_t)`` and
    ``resid = y - X1 beta``.
    """
    q_b = Z.shape[1]
    resid = y - X1 @ params.beta
    wt = W @ params.tau
    zb = Z @ nodes[:, :q_b].T
    if V.shape[1]:
        vw = V @ nodes[:, q_b:].T
        ev = np.exp(-vw)
        logvar = wt[:, None] + vw
    else:
        ev = np.ones((len(y), nodes.shape[0]))
        logvar = np.broadcast_to(wt[:, None], zb.shape)
    e = resid[:, None] - zb
    ll = -0.5 * (LOG_2PI + logvar) - 0.5 * e * e * ev * np.exp(-wt)[:, None]
    return ll, ev, resid


def survival_terms(D, X2, params: Params, cumhaz: np.ndarray,
                   log_jump: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """log f(T_i, D_i | theta_t) for every subject and node.

    ``cumhaz[i, k]`` is Lambda_0k(T_i); ``log_jump[i]`` is log of the
    baseline jump of the observed cause at T_i (ignored when censored).
    """
    n = len(D)
    out = np.zeros((n, nodes.shape[0]))
    for k in range(params.gamma.shape[0]):
        eta = X2 @ params.gamma[k]
        assoc = nodes @ params.alpha[k]
        lam = cumhaz[:, k]
        nz = lam > 0
        if np.any(nz):
            out[nz] -= lam[nz, None] * np.exp(eta[nz, None] + assoc[None, :])
        ev = D == k + 1
        if np.any(ev):
            out[ev] += (log_jump[ev] + eta[ev])[:, None] + assoc[None, :]
    return out


def normalise(logj: np.ndarray):
    """Posterior weights and log marginal from log joint values (n, G)."""
    m = logj.max(axis=1)
    if not np.all(np.isfinite(m)):
        raise DegenerateDensity("joint density is zero or non-finite on the whole grid")
    p = np.exp(logj - m[:, None])
    s = p.sum(axis=1)
    w = p / s[:, None]
    return w, m + np.log(s)


# -- single-subject posterior expectations -----------------------------------

TAGS = ("one", "theta", "theta2", "exp_neg_vw", "b_exp_neg_vw",
        "bb_exp_neg_vw", "exp_assoc", "theta_exp_assoc", "theta2_exp_assoc",
        "log_marginal")


def subject_log_joint(subject: SubjectData, params: Params,
                      baselines: list[BaselineHazard], grid: QuadGrid,
                      log_prior: np.ndarray | None = None):
    K = params.gamma.shape[0]
    cum = np.array([[bl.at(subject.T) for bl in baselines]]).reshape(1, K)
    log_jump = np.zeros(1)
    if subject.D > 0:
        bl = baselines[subject.D - 1]
        jump = bl.at(subject.T) - bl.left_limit(subject.T)
        if jump <= 0:
            raise DegenerateDensity(
                f"no baseline jump at the event time of subject {subject.subject_id!r}")
        log_jump[0] = np.log(jump)
    ll, ev, resid = longitudinal_terms(subject.y, subject.X1, subject.Z,
                                       subject.W, subject.V, params, grid.nodes)
    logj = (ll.sum(axis=0)[None, :]
            + survival_terms(np.array([subject.D]), subject.x2[None, :], params,
                             cum, log_jump, grid.nodes)
            + grid.log_weights[None, :])
    if log_prior is not None:
        logj = logj + log_prior[None, :]
    return logj, ev, resid


def posterior_expectations(subject: SubjectData, params: Params,
                           baselines: list[BaselineHazard], grid: QuadGrid,
                           requests=TAGS) -> dict:
    """Posterior expectations E[h(theta) | Y_i, T_i, D_i] for one subject.

    Row-level tags return one entry per longitudinal row and risk-level tags
    one entry per risk.
    """
    logj, ev, _ = subject_log_joint(subject, params, baselines, grid)
    w, logm = normalise(logj)
    w = w[0]
    nodes = grid.nodes
    q_b = subject.Z.shape[1]
    B = nodes[:, :q_b]
    out = {}
    for tag in requests:
        if tag == "one":
            out[tag] = float(w.sum())
        elif tag == "log_marginal":
            out[tag] = float(logm[0])
        elif tag == "theta":
            out[tag] = w @ nodes
        elif tag == "theta2":
            out[tag] = np.einsum("t,ti,tj->ij", w, nodes, nodes)
        elif tag == "exp_neg_vw":
            out[tag] = ev @ w
        elif tag == "b_exp_neg_vw":
            out[tag] = (ev * w) @ B
        elif tag == "bb_exp_neg_vw":
            out[tag] = np.einsum("jt,ti,tk->jik", ev * w, B, B)
        elif tag == "exp_assoc":
            out[tag] = np.exp(nodes @ params.alpha.T).T @ w
        elif tag == "theta_exp_assoc":
            out[tag] = np.einsum("tk,t,ti->ki", np.exp(nodes @ params.alpha.T), w, nodes)
        elif tag == "theta2_exp_assoc":
            out[tag] = np.einsum("tk,t,ti,tj->kij", np.exp(nodes @ params.alpha.T),
                                 w, nodes, nodes)
        else:
            raise KeyError(f"unknown expectation tag {tag!r}")
    return out
