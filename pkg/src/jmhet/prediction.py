"""Dynamic prediction of cause-specific cumulative incidence.

For a subject event-free at landmark ``s`` with longitudinal history up to
``s``, the probability of failing from cause ``k`` by ``u`` is

    P_k(u, s) = E[ CIF_k(u, s | theta) / S(s | theta) ]

under the posterior of theta given the history and survival past ``s``.
The posterior reuses the prior-scaled quadrature grid with weights
f(Y | theta) S(s | theta).

Hazards are step functions, so within the jump at ``t`` all causes compete
for the mass ``S(t-)(1 - exp(-dLambda(t)))``, shared in proportion to the
cause-specific increments.  This keeps ``sum_k CIF_k + S(u) = S(s)`` exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import EmptyHistory, InputError, LandmarkBeyondData
from .model import BaselineHazard, Dataset, FitResult, Params
from .quadrature import QuadGrid, gauss_hermite_rule, longitudinal_terms, rescale_grid

LANDMARK_BEYOND_DATA = "landmark_beyond_data"
HORIZON_BEYOND_SUPPORT = "horizon_beyond_support"
# Histories with many rows give posteriors much narrower than the prior, and
# the prior-scaled grid then needs more points than the E-step uses.
MIN_PREDICTION_POINTS = 40


@dataclass(frozen=True)
class PredictionRequest:
    """History of one subject up to the landmark, plus prediction targets.

    ``risks`` are 1-based cause labels; ``None`` means all causes.
    """

    subject_id: object
    time: np.ndarray
    y: np.ndarray
    X1: np.ndarray
    Z: np.ndarray
    W: np.ndarray
    V: np.ndarray
    x2: np.ndarray
    landmark: float
    horizons: tuple
    risks: tuple | None = None

    def __post_init__(self):
        if len(self.y) == 0:
            raise EmptyHistory(f"subject {self.subject_id!r} has no longitudinal history")
        if not self.landmark > 0:
            raise InputError("landmark must be positive")
        t = np.asarray(self.time, dtype=float)
        if np.any(t > self.landmark):
            raise InputError(f"subject {self.subject_id!r} has history after the landmark")
        u = np.asarray(self.horizons, dtype=float)
        if u.ndim != 1 or len(u) == 0:
            raise InputError("at least one horizon is required")
        if np.any(u < self.landmark) or np.any(np.diff(u) <= 0):
            raise InputError("horizons must be increasing and not before the landmark")


@dataclass
class Prediction:
    subject_id: object
    landmark: float
    horizons: np.ndarray
    risks: tuple
    cif: np.ndarray                  # (len(horizons), len(risks))
    flags: set = field(default_factory=set)

    def to_frame(self) -> pd.DataFrame:
        H, R = self.cif.shape
        return pd.DataFrame({
            "subject_id": [self.subject_id] * (H * R),
            "risk": np.tile(self.risks, H),
            "s": self.landmark,
            "u": np.repeat(self.horizons, R),
            "cif": self.cif.reshape(-1),
            "flags": ";".join(sorted(self.flags)),
        })


def _linear_predictors(params: Params, x2: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """exp(x2' gamma_k + alpha_k' theta) with shape (K, G)."""
    return np.exp((params.gamma @ x2)[:, None] + params.alpha @ nodes.T)


def left_limit_survival(baselines: list[BaselineHazard], params: Params, x2,
                        theta, t: float) -> np.ndarray:
    """S(t- | theta) = exp(-sum_k Lambda_k(t- | theta)) for each row of ``theta``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    mult = _linear_predictors(params, np.asarray(x2, dtype=float), theta)
    lam0 = np.array([bl.left_limit(t) for bl in baselines])
    return np.exp(-(lam0[:, None] * mult).sum(axis=0))


def survival(baselines: list[BaselineHazard], params: Params, x2, theta, t: float) -> np.ndarray:
    """S(t | theta), right-continuous."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    mult = _linear_predictors(params, np.asarray(x2, dtype=float), theta)
    lam0 = np.array([bl.at(t) for bl in baselines])
    return np.exp(-(lam0[:, None] * mult).sum(axis=0))


def _jump_table(baselines: list[BaselineHazard], lo: float, hi: float):
    """Union of jump times in (lo, hi], ascending, and per-risk jumps there."""
    pieces = [bl.times[(bl.times > lo) & (bl.times <= hi)] for bl in baselines]
    grid_t = np.unique(np.concatenate(pieces)) if pieces else np.zeros(0)
    table = np.zeros((len(grid_t), len(baselines)))
    for k, bl in enumerate(baselines):
        ta, ja = bl.times[::-1], bl.jumps[::-1]
        idx = np.searchsorted(ta, grid_t)
        hit = idx < len(ta)
        hit[hit] = ta[idx[hit]] == grid_t[hit]
        table[hit, k] = ja[idx[hit]]
    return grid_t, table


def node_conditional_cif(baselines: list[BaselineHazard], params: Params, x2,
                         nodes: np.ndarray, s: float, horizons) -> np.ndarray:
    """CIF_k(u, s | theta) / S(s | theta) on every node.

    Returns an array of shape (len(horizons), K, G).
    """
    horizons = np.asarray(horizons, dtype=float)
    K, G = len(baselines), nodes.shape[0]
    mult = _linear_predictors(params, np.asarray(x2, dtype=float), nodes)
    times, jumps = _jump_table(baselines, s, horizons.max(initial=s))
    if len(times) == 0:
        return np.zeros((len(horizons), K, G))
    dlam = jumps[:, :, None] * mult[None]           # (J, K, G)
    tot = dlam.sum(axis=1)                           # (J, G)
    before = np.cumsum(tot, axis=0) - tot            # Lambda(t-) - Lambda(s)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(tot > 0, -np.expm1(-tot) / tot, 1.0)
    inc = (np.exp(-before) * frac)[:, None, :] * dlam
    acc = np.concatenate([np.zeros((1, K, G)), np.cumsum(inc, axis=0)])
    return acc[np.searchsorted(times, horizons, side="right")]


def posterior_log_weights(req: PredictionRequest, fit: FitResult, grid: QuadGrid) -> np.ndarray:
    """Normalised log posterior weights given the history and T > s."""
    params = fit.params
    ll, _, _ = longitudinal_terms(np.asarray(req.y, float), np.asarray(req.X1, float),
                                  np.asarray(req.Z, float), np.asarray(req.W, float),
                                  np.asarray(req.V, float).reshape(len(req.y), -1),
                                  params, grid.nodes)
    mult = _linear_predictors(params, np.asarray(req.x2, float), grid.nodes)
    lam_s = np.array([bl.at(req.landmark) for bl in fit.baselines])
    logj = grid.log_weights + ll.sum(axis=0) - (lam_s[:, None] * mult).sum(axis=0)
    m = logj.max()
    return logj - m - np.log(np.exp(logj - m).sum())


def prediction_grid(fit: FitResult, quad_points: int | None = None) -> QuadGrid:
    n_q = quad_points or max(fit.spec.quad_points, MIN_PREDICTION_POINTS)
    return rescale_grid(gauss_hermite_rule(n_q), fit.params.sigma)


def conditional_cif(req: PredictionRequest, fit: FitResult, grid: QuadGrid | None = None,
                    strict: bool = False) -> Prediction:
    """Predicted cumulative incidence for each (horizon, risk) of ``req``.

    A landmark at or beyond the last baseline jump gives zeros with the
    ``landmark_beyond_data`` flag (or raises with ``strict=True``); horizons
    past the last jump are evaluated with a constant cumulative hazard and
    flagged ``horizon_beyond_support``.
    """
    grid = grid if grid is not None else prediction_grid(fit)
    K = fit.spec.K
    risks = tuple(range(1, K + 1)) if req.risks is None else tuple(int(r) for r in req.risks)
    if any(r < 1 or r > K for r in risks):
        raise InputError(f"risk indices must be in 1..{K}")
    horizons = np.asarray(req.horizons, dtype=float)
    last = max((bl.times[0] for bl in fit.baselines if len(bl.times)), default=-np.inf)
    flags = set()
    if req.landmark >= last:
        if strict:
            raise LandmarkBeyondData(
                f"landmark {req.landmark} is not before the last event time {last}")
        flags.add(LANDMARK_BEYOND_DATA)
        warnings.warn(f"landmark {req.landmark} beyond last event time; returning 0",
                      RuntimeWarning, stacklevel=2)
        return Prediction(req.subject_id, req.landmark, horizons, risks,
                          np.zeros((len(horizons), len(risks))), flags)
    if horizons[-1] > last:
        flags.add(HORIZON_BEYOND_SUPPORT)
    logw = posterior_log_weights(req, fit, grid)
    node = node_conditional_cif(fit.baselines, fit.params, req.x2, grid.nodes,
                                req.landmark, horizons)
    cif = node @ np.exp(logw)                       # (H, K)
    cif = np.clip(cif[:, [r - 1 for r in risks]], 0.0, 1.0)
    return Prediction(req.subject_id, req.landmark, horizons, risks, cif, flags)


def requests_from_dataset(data: Dataset, landmark: float, horizons, risks=None,
                          at_risk_only: bool = True) -> list[PredictionRequest]:
    """One request per subject event-free at ``landmark``, truncating histories."""
    reqs = []
    for i in range(data.n):
        if at_risk_only and not data.T[i] > landmark:
            continue
        sl = data.rows_of(i)
        keep = data.time[sl] <= landmark
        reqs.append(PredictionRequest(
            data.subject_ids[i], data.time[sl][keep], data.y[sl][keep],
            data.X1[sl][keep], data.Z[sl][keep], data.W[sl][keep], data.V[sl][keep],
            data.X2[i], float(landmark), tuple(horizons), risks))
    return reqs


def predict_frame(preds: list[Prediction]) -> pd.DataFrame:
    cols = ["subject_id", "risk", "s", "u", "cif", "flags"]
    if not preds:
        return pd.DataFrame(columns=cols)
    return pd.concat([p.to_frame() for p in preds], ignore_index=True)[cols]
