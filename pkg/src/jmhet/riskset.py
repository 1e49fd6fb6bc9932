"""Linear-scan risk-set kernels and their naive reference versions.

All kernels work on a :class:`SortedCohort`: subjects sorted ascending by
observed time and, per risk, the distinct uncensored event times in
descending order.  The cohort stores for every subject the position of the
largest event time not exceeding its observed time, found by one merge-style
scan; afterwards cumulative-hazard lookup, risk-set sums and prefix scores
are bucket sums plus a running sum, all O(n + q_k).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, UnsortedCohort
from .model import BaselineHazard


@dataclass
class ScanCounter:
    """Counts summand visits made by the kernels."""

    visits: int = 0

    def add(self, m: int) -> None:
        self.visits += int(m)


@dataclass(frozen=True)
class RiskTimes:
    times: np.ndarray    # descending distinct event times
    counts: np.ndarray   # ties d_kj
    pos: np.ndarray      # per subject: index into times, len(times) if none <= T_i

    @property
    def q(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class SortedCohort:
    T: np.ndarray
    D: np.ndarray
    risks: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.T)

    @property
    def K(self) -> int:
        return len(self.risks)


def build_cohort(T, D, K: int, counter: ScanCounter | None = None) -> SortedCohort:
    T = np.asarray(T, dtype=float)
    D = np.asarray(D, dtype=int)
    if len(T) > 1 and np.any(np.diff(T) < 0):
        raise UnsortedCohort("observed times must be sorted ascending")
    Tl = T.tolist()
    n = len(Tl)
    risks = []
    for k in range(1, K + 1):
        ev = T[D == k]
        if len(ev):
            new = np.concatenate([[True], ev[1:] != ev[:-1]])
            asc = ev[new]
            cnt_asc = np.diff(np.concatenate([np.flatnonzero(new), [len(ev)]]))
        else:
            asc = np.zeros(0)
            cnt_asc = np.zeros(0, dtype=int)
        q = len(asc)
        # merge scan: number of event times <= T_(i), advancing monotonically
        asc_l = asc.tolist()
        pos = [0] * n
        j = 0
        for i in range(n):
            t = Tl[i]
            while j < q and asc_l[j] <= t:
                j += 1
            pos[i] = q - j
        if counter is not None:
            counter.add(n + q)
        risks.append(RiskTimes(asc[::-1].copy(), cnt_asc[::-1].copy(),
                               np.array(pos, dtype=np.intp)))
    return SortedCohort(T, D, risks)


def _check_baseline(baseline: BaselineHazard, rt: RiskTimes) -> None:
    if len(baseline.times) != rt.q or not np.array_equal(baseline.times, rt.times):
        raise InputError("baseline jump times differ from the cohort's event times")


def lookup_cumhaz(baseline: BaselineHazard, cohort: SortedCohort, k: int,
                  counter: ScanCounter | None = None) -> np.ndarray:
    """Lambda_0k(T_(i)) for every subject; ``k`` is zero-based."""
    rt = cohort.risks[k]
    _check_baseline(baseline, rt)
    ext = np.concatenate([baseline.cumulative, [0.0]])
    if counter is not None:
        counter.add(cohort.n + rt.q)
    return ext[rt.pos]


def _columns(a: np.ndarray, rows: int) -> np.ndarray:
    """View ``a`` as (rows, prod(trailing dims)); safe when ``rows`` is 0."""
    return a.reshape(rows, int(np.prod(a.shape[1:], dtype=int)))


def riskset_sums(cohort: SortedCohort, k: int, a: np.ndarray,
                 counter: ScanCounter | None = None) -> np.ndarray:
    """Sum of ``a_r`` over the risk set at each event time of risk ``k``.

    Output row ``j`` corresponds to ``cohort.risks[k].times[j]``.
    """
    rt = cohort.risks[k]
    a = np.asarray(a, dtype=float)
    flat = _columns(a, len(a))
    q = rt.q
    buckets = np.empty((q, flat.shape[1]))
    for c in range(flat.shape[1]):
        buckets[:, c] = np.bincount(rt.pos, weights=flat[:, c], minlength=q + 1)[:q]
    if counter is not None:
        counter.add(cohort.n + q)
    # R(t_(j+1)) = R(t_j) + {r : T_r in [t_(j+1), t_j)}
    return np.cumsum(buckets, axis=0).reshape((q,) + a.shape[1:])


def prefix_score_scan(cohort: SortedCohort, k: int, b: np.ndarray,
                      counter: ScanCounter | None = None) -> np.ndarray:
    """B(T_i) = sum of ``b_kj`` over event times t_kj <= T_i, per subject."""
    rt = cohort.risks[k]
    b = np.asarray(b, dtype=float)
    if len(b) != rt.q:
        raise InputError("one value per event time is required")
    flat = _columns(b, rt.q)
    acc = np.cumsum(flat[::-1], axis=0)[::-1]
    ext = np.vstack([acc, np.zeros((1, flat.shape[1]))])
    if counter is not None:
        counter.add(cohort.n + rt.q)
    return ext[rt.pos].reshape((cohort.n,) + b.shape[1:])


# -- naive references --------------------------------------------------------

_BLOCK = 512


def naive_lookup_cumhaz(baseline: BaselineHazard, T: np.ndarray,
                        counter: ScanCounter | None = None) -> np.ndarray:
    """Global search of the step function for every subject."""
    times, cum = baseline.times, baseline.cumulative
    T = np.asarray(T, dtype=float)
    out = np.zeros(len(T))
    if len(times) == 0:
        return out
    for s in range(0, len(T), _BLOCK):
        mask = times[None, :] <= T[s:s + _BLOCK, None]
        has = mask.any(axis=1)
        first = np.argmax(mask, axis=1)
        out[s:s + _BLOCK] = np.where(has, cum[first], 0.0)
    if counter is not None:
        counter.add(len(T) * len(times))
    return out


def naive_riskset_sums(times: np.ndarray, T: np.ndarray, a: np.ndarray,
                       counter: ScanCounter | None = None) -> np.ndarray:
    """Full scan of all subjects at every event time."""
    a = np.asarray(a, dtype=float)
    flat = _columns(a, len(a))
    out = np.zeros((len(times), flat.shape[1]))
    for s in range(0, len(times), _BLOCK):
        mask = T[None, :] >= times[s:s + _BLOCK, None]
        for c in range(flat.shape[1]):
            out[s:s + _BLOCK, c] = np.where(mask, flat[:, c][None, :], 0.0).sum(axis=1)
    if counter is not None:
        counter.add(len(T) * len(times))
    return out.reshape((len(times),) + a.shape[1:])


def naive_prefix_score(times: np.ndarray, T: np.ndarray, b: np.ndarray,
                       counter: ScanCounter | None = None) -> np.ndarray:
    """Double loop over subjects and event times."""
    b = np.asarray(b, dtype=float)
    flat = _columns(b, len(times))
    T = np.asarray(T, dtype=float)
    out = np.zeros((len(T), flat.shape[1]))
    for s in range(0, len(T), _BLOCK):
        mask = times[None, :] <= T[s:s + _BLOCK, None]
        for c in range(flat.shape[1]):
            out[s:s + _BLOCK, c] = np.where(mask, flat[:, c][None, :], 0.0).sum(axis=1)
    if counter is not None:
        counter.add(len(T) * len(times))
    return out.reshape((len(T),) + b.shape[1:])


# -- benchmark ---------------------------------------------------------------

def random_cohort(n: int, K: int, rng: np.random.Generator,
                  censor: float = 0.25):
    T = np.sort(np.round(rng.exponential(1.0, n), 6) + 1e-6)
    D = rng.integers(1, K + 1, n)
    D[rng.random(n) < censor] = 0
    return T, D


def _fast_pass(T, D, K, a, counter):
    cohort = build_cohort(T, D, K, counter)
    for k in range(K):
        rt = cohort.risks[k]
        s0 = riskset_sums(cohort, k, a, counter)
        jumps = rt.counts / s0
        bl = BaselineHazard(rt.times, jumps, rt.counts)
        lookup_cumhaz(bl, cohort, k, counter)
        prefix_score_scan(cohort, k, jumps / s0, counter)


def _naive_pass(T, D, K, a, counter):
    for k in range(1, K + 1):
        times, counts = np.unique(T[D == k], return_counts=True)
        times, counts = times[::-1], counts[::-1]
        s0 = naive_riskset_sums(times, T, a, counter)
        jumps = counts / s0
        naive_lookup_cumhaz(BaselineHazard(times, jumps, counts), T, counter)
        naive_prefix_score(times, T, jumps / s0, counter)


def benchmark(sizes=(2000, 20000), K: int = 2, seed: int = 0,
              repeats: int = 3, naive: bool = True) -> list[dict]:
    """Time the fast and naive kernel passes (build, sums, lookup, prefix)."""
    rows = []
    rng = np.random.default_rng(seed)
    for n in sizes:
        T, D = random_cohort(n, K, rng)
        a = rng.uniform(0.5, 2.0, n)
        kernels = [("fast", _fast_pass)] + ([("naive", _naive_pass)] if naive else [])
        for name, fn in kernels:
            best, visits = None, 0
            for _ in range(repeats):
                counter = ScanCounter()
                t0 = time.perf_counter_ns()
                fn(T, D, K, a, counter)
                dt = time.perf_counter_ns() - t0
                best = dt if best is None else min(best, dt)
                visits = counter.visits
            rows.append({"n": n, "kernel": name, "wall_ns": best,
                         "summand_visits": visits})
    return rows
