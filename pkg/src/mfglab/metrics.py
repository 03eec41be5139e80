"""Wasserstein distances, empirical-measure rates and convergence tables."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import ContractViolation

EXACT_CAP = 512
QUANTITIES = ("value_gap_sq", "control_W2_int", "gamma_N", "chaos_W2", "z_sum")
TABLE_HEADER = ["N", "estimate", "se", "theory_bound", "quantity", "model", "seed"]
FITS_HEADER = ["quantity", "slope", "intercept", "r2", "n_points"]


def _sorted_cdf(x, w, order=None):
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise ContractViolation("empty sample")
    if order is None:
        order = np.argsort(x, kind="stable")
    if w is None:
        c = np.arange(1, x.size + 1) / x.size
    else:
        w = np.asarray(w, dtype=float).ravel()
        if w.shape != x.shape or np.any(w < 0) or w.sum() <= 0:
            raise ContractViolation("weights must be nonnegative with positive mass")
        c = np.cumsum(w[order])
        c = c / c[-1]
    c[-1] = 1.0
    return x[order], c


def _w2sq_quantiles(xa, ca, xb, cb) -> float:
    # both cdfs are sorted, so the stable sort is a linear merge
    u = np.sort(np.concatenate([ca, cb]), kind="stable")
    du = np.diff(u, prepend=0.0)
    keep = du > 0
    u, du = u[keep], du[keep]
    mid = u - 0.5 * du
    qa = xa[np.minimum(np.searchsorted(ca, mid, side="left"), xa.size - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mid, side="left"), xb.size - 1)]
    return float(np.sum((qa - qb) ** 2 * du))


def w2sq_1d(a, b, wa=None, wb=None, order_a=None, order_b=None) -> float:
    """Squared 2-Wasserstein distance between two weighted atomic laws on R.

    Both laws are normalized to unit mass.  Equal-size unweighted samples use
    the sorted pairing; otherwise quantile functions are coupled on the merged
    grid of cumulative masses.  ``order_a``/``order_b`` are optional
    precomputed sorting permutations.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ContractViolation("empty sample")
    if wa is None and wb is None and a.size == b.size:
        d = np.sort(a) - np.sort(b)
        return float(np.mean(d * d))
    xa, ca = _sorted_cdf(a, wa, order_a)
    xb, cb = _sorted_cdf(b, wb, order_b)
    return _w2sq_quantiles(xa, ca, xb, cb)


def wasserstein2_1d(a, b, wa=None, wb=None) -> float:
    """2-Wasserstein distance between (optionally weighted) samples on R."""
    return math.sqrt(max(w2sq_1d(a, b, wa, wb), 0.0))


def wasserstein2_exact_small(a, b) -> float:
    """Exact 2-Wasserstein distance between two uniform clouds of n points.

    Solves the squared-cost assignment problem; limited to n <= 512.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape != b.shape or a.shape[0] == 0:
        raise ContractViolation("clouds must be nonempty with equal shapes")
    if a.shape[0] > EXACT_CAP:
        raise ContractViolation(f"exact assignment limited to n <= {EXACT_CAP}")
    cost = cdist(a, b, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return math.sqrt(cost[rows, cols].mean())


class QuantileReference:
    """Reference law on R prepared for repeated W2 evaluations against
    uniform empirical measures of a fixed size.

    For a uniform law on sorted points ``e_1 <= ... <= e_N`` the squared
    distance is ``mean(e^2) - 2 sum_j e_j (I1(j/N) - I1((j-1)/N)) + I2(1)``
    where ``I1`` and ``I2`` integrate the reference quantile function and its
    square.
    """

    def __init__(self, x, w=None):
        self.x, self.c = _sorted_cdf(x, w)
        du = np.diff(self.c, prepend=0.0)
        self._c0 = np.concatenate([[0.0], self.c])
        self._i1 = np.concatenate([[0.0], np.cumsum(self.x * du)])
        self._i2 = np.concatenate([[0.0], np.cumsum(self.x * self.x * du)])
        self._cache = {}

    def _integral(self, table, u):
        j = np.clip(np.searchsorted(self.c, u, side="left"), 0, self.x.size - 1)
        vals = self.x[j] if table is self._i1 else self.x[j] ** 2
        return table[j] + vals * (u - self._c0[j])

    def _weights(self, n):
        if n not in self._cache:
            u = np.arange(n + 1) / n
            self._cache[n] = np.diff(self._integral(self._i1, u))
        return self._cache[n]

    def w2sq_uniform(self, samples) -> np.ndarray:
        """Squared distances for each row of ``samples`` (shape ``(r, n)``)."""
        e = np.sort(np.atleast_2d(samples), axis=-1)
        n = e.shape[-1]
        val = np.mean(e * e, axis=-1) - 2.0 * e @ self._weights(n) + self._i2[-1]
        return np.maximum(val, 0.0)


def rate_bound(N, n: int, q: float) -> float:
    """Empirical-measure rate ``r_{N,n,q}``.

    ``n < 4``: ``N^{-1/2} + N^{-(q-2)/q}``; ``n = 4``: ``N^{-1/2} log(1+N) +
    N^{-(q-2)/q}``; ``n > 4``: ``N^{-2/n} + N^{-(q-2)/q}``.  Excluded are
    ``q = 4`` for ``n <= 4`` and ``q = n/(n-2)`` for ``n > 4``.
    """
    if N < 1 or n < 1:
        raise ContractViolation("N and n must be positive")
    if not q > 2:
        raise ContractViolation("moment order q must exceed 2")
    if n <= 4 and q == 4:
        raise ContractViolation("q = 4 is excluded when n <= 4 (case split n<4 / n=4)")
    if n > 4 and abs(q - n / (n - 2)) < 1e-12:
        raise ContractViolation("q = n/(n-2) is excluded when n > 4 (case split n>4)")
    N = float(N)
    tail = N ** (-(q - 2.0) / q)
    if n < 4:
        return N ** -0.5 + tail
    if n == 4:
        return N ** -0.5 * math.log(1.0 + N) + tail
    return N ** (-2.0 / n) + tail


@dataclass
class RateRow:
    N: int
    estimate: float
    se: float
    theory_bound: float


@dataclass
class RateTable:
    """Estimates of one convergence quantity across a sweep over N."""

    quantity: str
    model: str
    seed: int
    M: int = 0
    K: int = 0
    rows: List[RateRow] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    def add(self, N, estimate, se, theory_bound):
        if self.rows and N <= self.rows[-1].N:
            raise ContractViolation("N must be strictly increasing")
        self.rows.append(RateRow(int(N), float(estimate), float(se), float(theory_bound)))

    @property
    def N(self) -> np.ndarray:
        return np.array([r.N for r in self.rows], dtype=float)

    @property
    def estimates(self) -> np.ndarray:
        return np.array([r.estimate for r in self.rows])

    @property
    def ses(self) -> np.ndarray:
        return np.array([r.se for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_HEADER)
            for r in self.rows:
                w.writerow([r.N, repr(r.estimate), repr(r.se), repr(r.theory_bound),
                            self.quantity, self.model, self.seed])

    @classmethod
    def from_csv(cls, path) -> "RateTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ContractViolation(f"empty table {path}")
        t = cls(rows[0]["quantity"], rows[0]["model"], int(rows[0]["seed"]))
        for r in rows:
            t.add(int(r["N"]), float(r["estimate"]), float(r["se"]), float(r["theory_bound"]))
        return t


def fit_loglog_slope(table, estimates: Optional[Sequence[float]] = None):
    """OLS fit of ``log(estimate)`` on ``log(N)``.

    Accepts a :class:`RateTable` or two sequences ``(N, estimates)``.
    Returns ``(slope, intercept, r2)``.
    """
    if isinstance(table, RateTable):
        N, est = table.N, table.estimates
    else:
        N, est = np.asarray(table, dtype=float), np.asarray(estimates, dtype=float)
    ok = (est > 0) & np.isfinite(est)
    if not ok.all():
        warnings.warn(f"dropping {int((~ok).sum())} nonpositive estimates from the fit",
                      RuntimeWarning, stacklevel=2)
    if ok.sum() < 3:
        raise ContractViolation("need at least 3 positive estimates for a slope fit")
    x, y = np.log(N[ok]), np.log(est[ok])
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum((y - A @ [slope, intercept]) ** 2) / ss if ss > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def write_fits(path, fits) -> None:
    """``fits`` is an iterable of ``(quantity, slope, intercept, r2, n_points)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FITS_HEADER)
        for q, s, i, r2, n in fits:
            w.writerow([q, repr(float(s)), repr(float(i)), repr(float(r2)), int(n)])


def gamma_N_estimate(mfg_solution, N: int, n_rep: int = 200, seed: int = 0, threads: int = 1):
    """``sup_t E[W2^2(L^N(X_t), L(X_t)) + W2^2(L^N(a_t), L(a_t))]``.

    Draws ``n_rep`` independent N-tuples of equilibrium copies and compares
    their empirical laws with the solution's weighted reference cloud at each
    grid time.  Returns ``(estimate, standard_error)``.
    """
    flow = mfg_solution.flow
    if flow.size < 10 * N:
        raise ContractViolation(f"reference cloud of size {flow.size} is smaller than 10*N={10 * N}")
    states, actions = mfg_solution.simulate_copies(n_rep * N, seed=seed, threads=threads)
    K = states.shape[1] - 1
    per_rep = np.zeros((n_rep, K + 1))
    for k in range(K + 1):
        meas = flow[k]
        ref_x = QuantileReference(meas.features[:, 0], meas.weights)
        ref_a = QuantileReference(meas.actions, meas.weights)
        per_rep[:, k] = (ref_x.w2sq_uniform(states[:, k, 0].reshape(n_rep, N))
                         + ref_a.w2sq_uniform(actions[:, k].reshape(n_rep, N)))
    mean = per_rep.mean(axis=0)
    k_star = int(np.argmax(mean))
    se = per_rep[:, k_star].std(ddof=1) / math.sqrt(n_rep) if n_rep > 1 else 0.0
    return float(mean[k_star]), float(se)
