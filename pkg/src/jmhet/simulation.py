"""Data generator, Monte Carlo study harness and cross-validated MAPE.

The generator follows the two-risk design: a location-scale longitudinal
outcome measured every 0.25 time units from t = 0 until the observed time,
with constant baseline hazards and Uniform(4, 8) censoring.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import EmptyGroup, InsufficientRiskSet, JMHError
from .model import HETEROGENEOUS, HOMOGENEOUS, Dataset, ModelSpec, Params, build_dataset, param_names


COVARIATES = ("x1", "x2", "x3")
SIM_COLUMNS = {
    "x1": ["1", "x1", "x2", "x3", "time"],
    "z": ["1"],
    "w": ["1", "x1", "x2", "x3", "time"],
    "v": ["1"],
    "x2": ["x1", "x2", "x3"],
}


@dataclass(frozen=True)
class SimDesign:
    n: int = 800
    beta: tuple = (5.0, 1.5, 2.0, 1.0, 2.0)
    tau: tuple = (0.5, 0.5, -0.2, 0.2, 0.05)
    gamma: tuple = ((1.0, 0.5, 0.5), (-0.5, 0.5, 0.25))
    alpha_b: tuple = (1.0, -1.0)
    alpha_w: tuple = (0.5, -0.5)
    sigma_b2: float = 0.5
    sigma_w2: float = 0.5
    rho: float = 0.5
    lambda0: tuple = (0.05, 0.1)
    censor: tuple = (4.0, 8.0)
    visit_step: float = 0.25
    x3_mean: float = 1.0
    x3_var: float = 4.0
    seed: int = 1

    @property
    def sigma(self) -> np.ndarray:
        cov = self.rho * np.sqrt(self.sigma_b2 * self.sigma_w2)
        return np.array([[self.sigma_b2, cov], [cov, self.sigma_w2]])

    def spec(self, **controls) -> ModelSpec:
        return ModelSpec(p1=5, q_b=1, p_w=5, q_omega=1, p2=3, K=len(self.lambda0),
                         **controls)

    def true_params(self) -> Params:
        return Params(self.beta, self.tau, np.array(self.gamma),
                      np.column_stack([self.alpha_b, self.alpha_w]), self.sigma)

    def replace(self, **changes) -> "SimDesign":
        return dataclasses.replace(self, **changes)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based Philox generator for ``seed`` and an optional substream key."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def simulate_arrays(design: SimDesign, rng: np.random.Generator | None = None) -> dict:
    rng = rng if rng is not None else make_rng(design.seed)
    n = design.n
    x = np.column_stack([
        rng.binomial(1, 0.5, n).astype(float),
        rng.uniform(-1.0, 1.0, n),
        rng.normal(design.x3_mean, np.sqrt(design.x3_var), n),
    ])
    theta = rng.standard_normal((n, 2)) @ np.linalg.cholesky(design.sigma).T
    b, om = theta[:, 0], theta[:, 1]
    K = len(design.lambda0)
    latent = np.empty((n, K))
    for k in range(K):
        eta = x @ np.asarray(design.gamma[k]) + design.alpha_b[k] * b + design.alpha_w[k] * om
        latent[:, k] = -np.log(rng.uniform(size=n)) / (design.lambda0[k] * np.exp(eta))
    C = rng.uniform(design.censor[0], design.censor[1], n)
    first = latent.argmin(axis=1)
    tmin = latent[np.arange(n), first]
    T = np.minimum(tmin, C)
    D = np.where(tmin <= C, first + 1, 0)

    m = np.floor(T / design.visit_step).astype(int) + 1
    subj = np.repeat(np.arange(n), m)
    starts = np.repeat(np.cumsum(m) - m, m)
    t = (np.arange(m.sum()) - starts) * design.visit_step
    keep = t <= T[subj]
    subj, t = subj[keep], t[keep]
    xr = x[subj]
    X1 = np.column_stack([np.ones(len(t)), xr, t])
    mean = X1 @ np.asarray(design.beta) + b[subj]
    logvar = X1 @ np.asarray(design.tau) + om[subj]
    y = mean + np.exp(0.5 * logvar) * rng.standard_normal(len(t))
    return {"ids": np.arange(1, n + 1), "T": T, "D": D, "x": x, "theta": theta,
            "row_subject": subj, "time": t, "y": y, "X1": X1}


def simulate_cohort(design: SimDesign, rng: np.random.Generator | None = None,
                    spec: ModelSpec | None = None) -> Dataset:
    a = simulate_arrays(design, rng)
    spec = spec or design.spec()
    N = len(a["y"])
    return build_dataset(spec, a["ids"], a["T"], a["D"], a["x"], a["ids"][a["row_subject"]],
                         a["time"], a["y"], a["X1"], np.ones((N, 1)), a["X1"].copy(),
                         np.ones((N, 1)))


def cohort_frames(data: Dataset) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Longitudinal and survival tables of a simulated cohort."""
    ids = data.subject_ids
    long = pd.DataFrame({"id": ids[data.row_subject], "time": data.time, "y": data.y})
    for j, c in enumerate(COVARIATES):
        long[c] = data.X1[:, j + 1]
    surv = pd.DataFrame({"id": ids, "obs_time": data.T, "status": data.D})
    for j, c in enumerate(COVARIATES):
        surv[c] = data.X2[:, j]
    order = np.argsort(data.order, kind="stable")
    surv = surv.iloc[order].reset_index(drop=True)
    return long, surv


# -- parallel map ------------------------------------------------------------

def parallel_map(fn, items, threads: int = 1) -> list:
    """Ordered map, in worker processes when ``threads > 1``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _config_data(data: Dataset, config: str) -> Dataset:
    if config == HOMOGENEOUS:
        return data.homogeneous()
    if config == HETEROGENEOUS:
        return data
    raise ValueError(f"unknown fit configuration {config!r}")


# -- Monte Carlo study -------------------------------------------------------

def _mc_replicate(job) -> list[dict]:
    from .em import fit

    design, seed, rep, configs, controls = job
    data = simulate_cohort(design, make_rng(seed, rep), design.spec(**controls))
    out = []
    for config in configs:
        d = _config_data(data, config)
        rec = {"rep": rep, "config": config, "names": param_names(d.spec)}
        try:
            res = fit(d)
            rec.update(estimate=res.params.vector(), se=res.se, converged=res.converged,
                       n_iter=res.n_iter, seconds=sum(res.runtime.values()), error=None)
        except JMHError as exc:
            rec.update(estimate=None, se=None, converged=False, n_iter=None, seconds=None,
                       error=f"{type(exc).__name__}: {exc}")
        out.append(rec)
    return out


def true_values(design: SimDesign, names: list[str], config: str) -> np.ndarray:
    """Truth per parameter name; NaN where the configuration has no counterpart.

    The homogeneous model's tau is the log of a pooled variance, which is not
    a parameter of the generating model.
    """
    spec = design.spec()
    truth = dict(zip(param_names(spec), design.true_params().vector()))
    vals = []
    for nm in names:
        if config == HOMOGENEOUS and nm.startswith("tau_"):
            vals.append(np.nan)
        else:
            vals.append(truth.get(nm, np.nan))
    return np.array(vals)


@dataclass
class MCReport:
    table: pd.DataFrame          # long format: one row per (config, parameter)
    replicates: pd.DataFrame     # one row per (rep, config)
    reps: int

    def failures(self, config: str) -> int:
        r = self.replicates
        return int((r.loc[r.config == config, "error"].notna()).sum())

    def nonconverged(self, config: str) -> int:
        r = self.replicates
        sel = (r.config == config) & r.error.isna()
        return int((~r.loc[sel, "converged"].astype(bool)).sum())

    def to_text(self) -> str:
        """Aligned table: Parameter, True, then Bias/SE/Est. SE/CP per config."""
        configs = list(dict.fromkeys(self.table.config))
        params = list(dict.fromkeys(self.table.parameter))
        head = [f"Monte Carlo replicates: {self.reps}"]
        for c in configs:
            head.append(f"{c}: {self.failures(c)} failed fits, "
                        f"{self.nonconverged(c)} not converged (included, flagged)")
        cols = ["Parameter", "True"]
        for c in configs:
            cols += [f"{c[:5]} Bias", "SE", "Est. SE", "CP (%)"]
        rows = []
        idx = self.table.set_index(["config", "parameter"])
        for p in params:
            truth = self.table.loc[self.table.parameter == p, "true"].dropna()
            row = [p, f"{truth.iloc[0]:g}" if len(truth) else "-"]
            for c in configs:
                if (c, p) not in idx.index:
                    row += ["-"] * 4
                    continue
                r = idx.loc[(c, p)]
                row += [_fmt(r.bias), _fmt(r.sd), _fmt(r.est_se), _fmt(100 * r.cp, 1)]
            rows.append(row)
        widths = [max(len(str(x)) for x in col) for col in zip(cols, *rows)]
        line = lambda r: "  ".join(str(x).rjust(w) if i else str(x).ljust(w)
                                   for i, (x, w) in enumerate(zip(r, widths)))
        return "\n".join(head + ["", line(cols), line(["-" * w for w in widths])]
                         + [line(r) for r in rows]) + "\n"


def _fmt(x, digits: int = 3) -> str:
    return "-" if not np.isfinite(x) else f"{x:.{digits}f}"


def monte_carlo_study(design: SimDesign, reps: int,
                      configs=(HETEROGENEOUS, HOMOGENEOUS), seed: int | None = None,
                      threads: int = 1, **controls) -> MCReport:
    """Bias, SE, Est. SE and coverage over ``reps`` simulated replicates.

    Replicate ``r`` draws its cohort from substream ``r`` of ``seed``, so the
    report does not depend on ``threads``.  Failed fits are listed in the
    replicate table and excluded from the summaries; fits that hit
    ``max_iter`` are kept and counted.
    """
    if reps < 2:
        raise ValueError("reps must be >= 2")
    seed = design.seed if seed is None else seed
    jobs = [(design, seed, r, tuple(configs), controls) for r in range(reps)]
    recs = [rec for batch in parallel_map(_mc_replicate, jobs, threads) for rec in batch]

    summary, rep_rows = [], []
    for config in configs:
        mine = [r for r in recs if r["config"] == config]
        names = mine[0]["names"]
        ok = [r for r in mine if r["error"] is None]
        truth = true_values(design, names, config)
        if ok:
            est = np.array([r["estimate"] for r in ok])
            se = np.array([r["se"] for r in ok])
        else:
            est = se = np.full((0, len(names)), np.nan)
        with np.errstate(invalid="ignore"):
            mean = est.mean(axis=0) if len(est) else np.full(len(names), np.nan)
            sd = est.std(axis=0, ddof=1) if len(est) > 1 else np.full(len(names), np.nan)
            est_se = se.mean(axis=0) if len(se) else np.full(len(names), np.nan)
            cover = (np.abs(est - truth) <= 1.96 * se).mean(axis=0) if len(est) \
                else np.full(len(names), np.nan)
        cover = np.where(np.isnan(truth), np.nan, cover)
        for j, nm in enumerate(names):
            summary.append({"config": config, "parameter": nm, "true": truth[j],
                            "mean": mean[j], "bias": mean[j] - truth[j], "sd": sd[j],
                            "est_se": est_se[j], "cp": cover[j], "n_ok": len(ok)})
        for r in mine:
            rep_rows.append({"rep": r["rep"], "config": config, "converged": r["converged"],
                             "n_iter": r["n_iter"], "seconds": r["seconds"],
                             "error": r["error"]})
    return MCReport(pd.DataFrame(summary), pd.DataFrame(rep_rows), reps)


# -- empirical cumulative incidence and MAPE ---------------------------------

def empirical_cif(T, D, landmark: float, horizons, risk: int) -> np.ndarray:
    """Product-limit cumulative incidence of ``risk`` in (s, u], given T > s.

    Sum over event times ``t`` in (s, u] of the Kaplan-Meier all-cause
    survival just before ``t`` times the Nelson-Aalen increment of ``risk``.
    """
    T = np.asarray(T, dtype=float)
    D = np.asarray(D, dtype=int)
    alive = T > landmark
    if not np.any(alive):
        raise EmptyGroup("no subjects at risk at the landmark")
    T, D = T[alive], D[alive]
    horizons = np.atleast_1d(np.asarray(horizons, dtype=float))
    times = np.unique(T[D > 0])
    times = times[times <= horizons.max(initial=landmark)]
    if len(times) == 0:
        return np.zeros(len(horizons))
    Ts = np.sort(T)
    at_risk = len(Ts) - np.searchsorted(Ts, times, side="left")
    d_all = np.array([np.sum((T == t) & (D > 0)) for t in times])
    d_k = np.array([np.sum((T == t) & (D == risk)) for t in times])
    km = np.cumprod(1.0 - d_all / at_risk)
    km_left = np.concatenate([[1.0], km[:-1]])
    acc = np.concatenate([[0.0], np.cumsum(km_left * d_k / at_risk)])
    return acc[np.searchsorted(times, horizons, side="right")]


def quartile_groups(pred: np.ndarray, groups: int = 4) -> list[np.ndarray]:
    """Split positions into ranked groups; ties keep the input order."""
    order = np.argsort(pred, kind="stable")
    return np.array_split(order, groups)


def fold_mape(pred, T, D, landmark: float, horizon: float, risk: int,
              groups: int = 4) -> float:
    """Mean over predicted-risk quartiles of |empirical CIF - mean prediction|."""
    pred = np.asarray(pred, dtype=float)
    if len(pred) < groups:
        raise InsufficientRiskSet(
            f"{len(pred)} subjects at risk at s={landmark} cannot form {groups} groups")
    T, D = np.asarray(T), np.asarray(D)
    err = []
    for g in quartile_groups(pred, groups):
        emp = empirical_cif(T[g], D[g], landmark, [horizon], risk)[0]
        err.append(abs(emp - pred[g].mean()))
    return float(np.mean(err))


def fold_assignment(n: int, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold label per position: seeded shuffle, contiguous equal blocks,
    remainder dealt round-robin."""
    perm = rng.permutation(n)
    size = n // folds
    labels = np.empty(n, dtype=int)
    labels[perm[:size * folds]] = np.repeat(np.arange(folds), size)
    labels[perm[size * folds:]] = np.arange(n - size * folds) % folds
    return labels


def _cv_fold(job) -> list[dict]:
    from .em import fit
    from .prediction import conditional_cif, prediction_grid, requests_from_dataset

    data, labels, fold, config, landmark, horizons = job
    train = _config_data(data.subset(np.flatnonzero(labels != fold)), config)
    valid = _config_data(data.subset(np.flatnonzero(labels == fold)), config)
    res = fit(train, se=False)
    grid = prediction_grid(res)
    reqs = requests_from_dataset(valid, landmark, horizons)
    if not reqs:
        raise InsufficientRiskSet(f"no validation subjects at risk at s={landmark}")
    cif = np.array([conditional_cif(r, res, grid).cif for r in reqs])   # (m, H, K)
    at = valid.T > landmark
    T, D = valid.T[at], valid.D[at]
    rows = []
    for k in range(valid.K):
        for h, u in enumerate(horizons):
            rows.append({"config": config, "fold": fold, "risk": k + 1, "u": float(u),
                         "mape": fold_mape(cif[:, h, k], T, D, landmark, u, k + 1),
                         "converged": res.converged})
    return rows


def mape_cv(data: Dataset, folds: int = 4, landmark: float = 3.0, horizons=(4.0, 6.0, 8.0),
            configs=(HETEROGENEOUS, HOMOGENEOUS), seed: int = 0,
            threads: int = 1) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Cross-validated MAPE per (config, risk, horizon).

    Returns the fold-averaged table and the per-fold rows.
    """
    if folds < 2:
        raise ValueError("at least two folds are required")
    labels = fold_assignment(data.n, folds, make_rng(seed))
    horizons = tuple(float(u) for u in horizons)
    jobs = [(data, labels, l, c, float(landmark), horizons)
            for c in configs for l in range(folds)]
    per_fold = pd.DataFrame([r for rows in parallel_map(_cv_fold, jobs, threads)
                             for r in rows])
    table = (per_fold.groupby(["config", "risk", "u"], sort=False, as_index=False)
             .agg(mape=("mape", "mean"), folds_not_converged=("converged", lambda c: int((~c).sum()))))
    return table, per_fold
