"""Domain types, dataset validation and model configuration.

A fitted model has a longitudinal part with subject-specific mean
``X1 beta + Z b`` and log within-subject variance ``W tau + V omega``, and a
cause-specific proportional hazards part ``lambda_0k(t) exp(X2 gamma_k +
alpha_bk b + alpha_wk omega)``.  The random effects ``theta = (b, omega)``
are multivariate normal with covariance ``sigma``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InputError,
    NoLongitudinalRows,
    NonIncreasingTimes,
    NotPositiveDefinite,
    RowAfterEventTime,
    UnknownSubject,
)

HETEROGENEOUS = "heterogeneous"
HOMOGENEOUS = "homogeneous"


@dataclass(frozen=True)
class LongitudinalRow:
    subject_id: Hashable
    time: float
    y: float
    x1: Sequence[float]
    z: Sequence[float]
    w: Sequence[float]
    v: Sequence[float] = ()


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: Hashable
    obs_time: float
    cause: int
    x2: Sequence[float]


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions and fitting controls.

    ``q_omega = 0`` together with ``p_w = 1`` (an intercept-only W) is the
    classical homogeneous-variance joint model.
    """

    p1: int
    q_b: int
    p_w: int
    q_omega: int
    p2: int
    K: int
    # Prior-scaled nodes resolve the narrow posteriors of long histories
    # slowly; at 10 points per dimension the quadrature error in the mean
    # parameters is comparable to their standard errors.
    quad_points: int = 40
    max_iter: int = 500
    tol_param: float = 1e-4
    tol_loglik: float = 1e-6
    variance_mode: str = HETEROGENEOUS

    def __post_init__(self):
        for name in ("p1", "q_b", "p_w", "q_omega", "p2"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be nonnegative")
        if self.K < 1:
            raise InputError("K must be at least 1")
        if self.quad_points < 3:
            raise InputError("quad_points must be at least 3")
        if self.q < 1:
            raise InputError("total random-effect dimension must be >= 1")
        if self.variance_mode == HETEROGENEOUS:
            if self.q_omega < 1:
                raise InputError("heterogeneous mode requires q_omega >= 1")
        elif self.variance_mode == HOMOGENEOUS:
            if self.q_omega != 0 or self.p_w != 1:
                raise InputError(
                    "homogeneous mode requires q_omega = 0 and an intercept-only W")
        else:
            raise InputError(f"unknown variance_mode {self.variance_mode!r}")

    @property
    def q(self) -> int:
        return self.q_b + self.q_omega

    @property
    def n_params(self) -> int:
        q = self.q
        return (self.p1 + self.p_w + q * (q + 1) // 2
                + self.K * self.p2 + self.K * q)

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _theta_labels(spec: ModelSpec) -> list[str]:
    b = ["b"] if spec.q_b == 1 else [f"b{j + 1}" for j in range(spec.q_b)]
    w = ["w"] if spec.q_omega == 1 else [f"w{j + 1}" for j in range(spec.q_omega)]
    return b + w


def vech_indices(q: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of the lower triangle, row by row."""
    rows, cols = [], []
    for i in range(q):
        for j in range(i + 1):
            rows.append(i)
            cols.append(j)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def param_names(spec: ModelSpec) -> list[str]:
    names = [f"beta_{j}" for j in range(spec.p1)]
    names += [f"tau_{j}" for j in range(spec.p_w)]
    lab = _theta_labels(spec)
    for i, j in zip(*vech_indices(spec.q)):
        names.append(f"sigma_{lab[i]}^2" if i == j else f"sigma_{lab[j]}{lab[i]}")
    for k in range(spec.K):
        names += [f"gamma_{k + 1}{j + 1}" for j in range(spec.p2)]
    for k in range(spec.K):
        names += [f"alpha_{lab[j]}{k + 1}" for j in range(spec.q)]
    return names


@dataclass
class Params:
    """Parametric part of the model.

    ``alpha`` has one row per risk; the first ``q_b`` columns multiply ``b``
    and the remaining ``q_omega`` columns multiply ``omega``.
    """

    beta: np.ndarray
    tau: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        self.tau = np.asarray(self.tau, dtype=float).reshape(-1)
        self.gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))

    def copy(self) -> "Params":
        return Params(self.beta.copy(), self.tau.copy(), self.gamma.copy(),
                      self.alpha.copy(), self.sigma.copy())

    def alpha_b(self, q_b: int) -> np.ndarray:
        return self.alpha[:, :q_b]

    def alpha_omega(self, q_b: int) -> np.ndarray:
        return self.alpha[:, q_b:]

    def check(self) -> None:
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-12, rtol=0):
            raise NotPositiveDefinite("sigma_theta is not symmetric")
        try:
            np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite("sigma_theta is not positive definite") from exc

    def vector(self) -> np.ndarray:
        q = self.sigma.shape[0]
        r, c = vech_indices(q)
        return np.concatenate([self.beta, self.tau, self.sigma[r, c],
                               self.gamma.reshape(-1), self.alpha.reshape(-1)])

    @classmethod
    def from_vector(cls, vec: np.ndarray, spec: ModelSpec) -> "Params":
        vec = np.asarray(vec, dtype=float)
        q = spec.q
        pos = 0

        def take(m):
            nonlocal pos
            out = vec[pos:pos + m]
            pos += m
            return out

        beta = take(spec.p1)
        tau = take(spec.p_w)
        r, c = vech_indices(q)
        sigma = np.zeros((q, q))
        sigma[r, c] = take(len(r))
        sigma[c, r] = sigma[r, c]
        gamma = take(spec.K * spec.p2).reshape(spec.K, spec.p2)
        alpha = take(spec.K * q).reshape(spec.K, q)
        return cls(beta.copy(), tau.copy(), gamma.copy(), alpha.copy(), sigma)

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "tau": self.tau.tolist(),
                "gamma": self.gamma.tolist(), "alpha": self.alpha.tolist(),
                "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d: dict, spec: ModelSpec | None = None) -> "Params":
        gamma = np.asarray(d["gamma"], dtype=float)
        alpha = np.asarray(d["alpha"], dtype=float)
        if spec is not None:
            gamma = gamma.reshape(spec.K, spec.p2)
            alpha = alpha.reshape(spec.K, spec.q)
        return cls(d["beta"], d["tau"], gamma, alpha, d["sigma"])


@dataclass
class BaselineHazard:
    """Step-function cumulative baseline hazard for one risk.

    ``times`` are the distinct uncensored event times in *descending* order,
    ``jumps`` the hazard increments there and ``counts`` the tie counts.
    """

    times: np.ndarray
    jumps: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.jumps = np.asarray(self.jumps, dtype=float).reshape(-1)
        self.counts = np.asarray(self.counts, dtype=int).reshape(-1)
        if not (len(self.times) == len(self.jumps) == len(self.counts)):
            raise DimensionMismatch("baseline arrays differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) >= 0):
            raise InputError("baseline jump times must be strictly decreasing")

    @classmethod
    def empty(cls) -> "BaselineHazard":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0, dtype=int))

    @property
    def cumulative(self) -> np.ndarray:
        """Lambda_0(t_j) for each jump time, aligned with ``times``."""
        return np.cumsum(self.jumps[::-1])[::-1]

    def _ascending(self):
        return self.times[::-1], np.cumsum(self.jumps[::-1])

    def at(self, t) -> np.ndarray:
        """Right-continuous evaluation Lambda_0(t)."""
        ta, ca = self._ascending()
        idx = np.searchsorted(ta, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[0.0], ca])[idx]

    def left_limit(self, t) -> np.ndarray:
        """Lambda_0(t-)."""
        ta, ca = self._ascending()
        idx = np.searchsorted(ta, np.asarray(t, dtype=float), side="left")
        return np.concatenate([[0.0], ca])[idx]

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "jumps": self.jumps.tolist(),
                "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineHazard":
        return cls(d["times"], d["jumps"], d["counts"])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SubjectData:
    """One subject's rows and survival observation."""

    subject_id: Hashable
    time: np.ndarray
    y: np.ndarray
    X1: np.ndarray
    Z: np.ndarray
    W: np.ndarray
    V: np.ndarray
    T: float
    D: int
    x2: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """Validated data, grouped by subject.

    Subjects are stored sorted ascending by observed time (stable), and
    ``order[i]`` gives the position of sorted subject ``i`` in the survival
    input. Longitudinal rows are stored contiguously per subject in the same
    order; rows of subject ``i`` are ``offsets[i]:offsets[i + 1]``.
    """

    spec: ModelSpec
    subject_ids: np.ndarray
    order: np.ndarray
    T: np.ndarray
    D: np.ndarray
    X2: np.ndarray
    offsets: np.ndarray
    time: np.ndarray
    y: np.ndarray
    X1: np.ndarray
    Z: np.ndarray
    W: np.ndarray
    V: np.ndarray
    row_subject: np.ndarray = field(init=False)

    def __post_init__(self):
        counts = np.diff(self.offsets)
        object.__setattr__(self, "row_subject",
                           _frozen(np.repeat(np.arange(len(counts)), counts)))

    @property
    def n(self) -> int:
        return len(self.T)

    @property
    def n_rows(self) -> int:
        return len(self.y)

    @property
    def K(self) -> int:
        return self.spec.K

    def rows_of(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def subject(self, i: int) -> SubjectData:
        r = self.rows_of(i)
        return SubjectData(self.subject_ids[i], self.time[r], self.y[r],
                           self.X1[r], self.Z[r], self.W[r], self.V[r],
                           float(self.T[i]), int(self.D[i]), self.X2[i])

    def subset(self, idx: Iterable[int]) -> "Dataset":
        """Dataset restricted to sorted-subject positions ``idx``."""
        idx = np.asarray(sorted(int(i) for i in idx), dtype=int)
        rows = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1])
                               for i in idx]) if len(idx) else np.zeros(0, int)
        counts = np.diff(self.offsets)[idx]
        return build_dataset(
            self.spec, self.subject_ids[idx], self.T[idx], self.D[idx],
            self.X2[idx], np.repeat(self.subject_ids[idx], counts),
            self.time[rows], self.y[rows], self.X1[rows], self.Z[rows],
            self.W[rows], self.V[rows])

    def homogeneous(self) -> "Dataset":
        """The same data under the homogeneous-variance configuration."""
        spec = self.spec.replace(q_omega=0, p_w=1, variance_mode=HOMOGENEOUS)
        return dataclasses.replace(
            self, spec=spec, W=_frozen(np.ones((self.n_rows, 1))),
            V=_frozen(np.zeros((self.n_rows, 0))))

    def summary(self) -> dict:
        return {"n": self.n, "n_rows": self.n_rows,
                "censored": float(np.mean(self.D == 0)),
                **{f"event_{k}": float(np.mean(self.D == k))
                   for k in range(1, self.K + 1)},
                "rows_per_subject": self.n_rows / self.n}


def _as_2d(a, n, width, what):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1 and width == 0 and a.size == 0:
        a = np.zeros((n, 0))
    if a.ndim == 1 and n == a.size and width == 1:
        a = a.reshape(n, 1)
    if a.shape != (n, width):
        raise DimensionMismatch(f"{what} has shape {a.shape}, expected {(n, width)}")
    return a


def build_dataset(spec: ModelSpec, surv_ids, T, D, X2, row_ids, time, y,
                  X1, Z, W, V=None) -> Dataset:
    """Vectorised validation of array-form data.

    ``surv_ids`` / ``T`` / ``D`` / ``X2`` hold one entry per subject, the
    row arrays one entry per longitudinal measurement.
    """
    surv_ids = np.asarray(surv_ids, dtype=object)
    n = len(surv_ids)
    if n == 0:
        raise InputError("no subjects")
    T = np.asarray(T, dtype=float).reshape(-1)
    D = np.asarray(D).reshape(-1)
    if len(T) != n or len(D) != n:
        raise DimensionMismatch("survival arrays differ in length")
    if not np.all(np.isfinite(T)) or np.any(T <= 0):
        raise InputError("obs_time must be finite and > 0")
    if not np.all(np.equal(np.mod(D, 1), 0)):
        raise InputError("cause codes must be integers")
    D = D.astype(int)
    if np.any(D < 0) or np.any(D > spec.K):
        raise InputError(f"cause codes must lie in 0..{spec.K}")
    X2 = _as_2d(X2, n, spec.p2, "x2")
    index = {sid: i for i, sid in enumerate(surv_ids.tolist())}
    if len(index) != n:
        raise InputError("duplicate subject in survival records")

    row_ids = np.asarray(row_ids, dtype=object)
    N = len(row_ids)
    time = np.asarray(time, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(time) != N or len(y) != N:
        raise DimensionMismatch("longitudinal arrays differ in length")
    if V is None:
        V = np.zeros((N, 0))
    X1 = _as_2d(X1, N, spec.p1, "x1")
    Z = _as_2d(Z, N, spec.q_b, "z")
    W = _as_2d(W, N, spec.p_w, "w")
    V = _as_2d(V, N, spec.q_omega, "v")
    for name, a in (("time", time), ("y", y), ("x1", X1), ("z", Z), ("w", W),
                    ("v", V), ("x2", X2)):
        if not np.all(np.isfinite(a)):
            raise InputError(f"non-finite values in {name}")
    if np.any(time < 0):
        raise InputError("longitudinal times must be >= 0")

    try:
        subj = np.fromiter((index[s] for s in row_ids.tolist()), dtype=int, count=N)
    except KeyError as exc:
        raise UnknownSubject(f"longitudinal subject {exc.args[0]!r} has no survival record") from None

    # group rows by subject keeping input order within subject
    grp = np.argsort(subj, kind="stable")
    subj_g, time_g = subj[grp], time[grp]
    counts = np.bincount(subj_g, minlength=n)
    if np.any(counts == 0):
        missing = surv_ids[np.flatnonzero(counts == 0)[0]]
        raise NoLongitudinalRows(f"subject {missing!r} has no longitudinal rows")
    same = subj_g[1:] == subj_g[:-1]
    bad = np.flatnonzero(same & (np.diff(time_g) <= 0))
    if len(bad):
        raise NonIncreasingTimes(
            f"times of subject {surv_ids[subj_g[bad[0]]]!r} are not strictly increasing")
    late = np.flatnonzero(time_g > T[subj_g])
    if len(late):
        s = subj_g[late[0]]
        raise RowAfterEventTime(
            f"subject {surv_ids[s]!r} has a measurement at t={time_g[late[0]]} "
            f"after its observed time {T[s]}")

    order = np.argsort(T, kind="stable")
    rank = np.empty(n, dtype=int)
    rank[order] = np.arange(n)
    new_subj = rank[subj_g]
    rows = grp[np.argsort(new_subj, kind="stable")]
    offsets = np.concatenate([[0], np.cumsum(counts[order])])
    return Dataset(
        spec=spec, subject_ids=_frozen(surv_ids[order]), order=_frozen(order),
        T=_frozen(T[order]), D=_frozen(D[order]), X2=_frozen(X2[order]),
        offsets=_frozen(offsets), time=_frozen(time[rows]), y=_frozen(y[rows]),
        X1=_frozen(X1[rows]), Z=_frozen(Z[rows]), W=_frozen(W[rows]),
        V=_frozen(V[rows]))


def validate_dataset(rows: Sequence[LongitudinalRow], surv: Sequence[SurvivalRecord],
                     spec: ModelSpec) -> Dataset:
    """Validate record-form input and group it by subject."""
    if not rows or not surv:
        raise InputError("empty input")
    for r in rows:
        for name, width in (("x1", spec.p1), ("z", spec.q_b), ("w", spec.p_w),
                            ("v", spec.q_omega)):
            if len(getattr(r, name)) != width:
                raise DimensionMismatch(
                    f"row of subject {r.subject_id!r}: {name} has length "
                    f"{len(getattr(r, name))}, expected {width}")
    for s in surv:
        if len(s.x2) != spec.p2:
            raise DimensionMismatch(
                f"subject {s.subject_id!r}: x2 has length {len(s.x2)}, expected {spec.p2}")
    N = len(rows)
    return build_dataset(
        spec,
        [s.subject_id for s in surv], [s.obs_time for s in surv],
        [s.cause for s in surv], np.array([list(s.x2) for s in surv], float).reshape(len(surv), spec.p2),
        [r.subject_id for r in rows], [r.time for r in rows], [r.y for r in rows],
        np.array([list(r.x1) for r in rows], float).reshape(N, spec.p1),
        np.array([list(r.z) for r in rows], float).reshape(N, spec.q_b),
        np.array([list(r.w) for r in rows], float).reshape(N, spec.p_w),
        np.array([list(r.v) for r in rows], float).reshape(N, spec.q_omega))


@dataclass
class FitResult:
    spec: ModelSpec
    params: Params
    baselines: list
    loglik_trace: list
    n_iter: int
    converged: bool
    subject_ids: np.ndarray | None = None
    posterior_means: np.ndarray | None = None
    cov: np.ndarray | None = None
    runtime: dict = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return param_names(self.spec)

    @property
    def se(self) -> np.ndarray | None:
        if self.cov is None:
            return None
        return np.sqrt(np.diag(self.cov))
