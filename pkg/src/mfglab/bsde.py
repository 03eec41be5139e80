"""Regression Monte-Carlo solver for BSDEs written under the base measure.

The backward recursion is the explicit scheme

    Z_k = E[(Y_{k+1} - E[Y_{k+1} | F_k]) dW_k / dt | F_k]
    Y_k = E[Y_{k+1} | F_k] + generator(k, Y_k^-, Z_k) dt

with conditional expectations replaced by ridge least squares on a
polynomial basis of the own state (plus optional cloud moments and extra
regressors).  Subtracting the continuation value before multiplying by the
increment does not change the target's conditional mean but removes most of
its variance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy import linalg

from .errors import ContractViolation, NumericalAbort, SingularRegression
from .paths import PathEnsemble

RIDGE_SCALE = 1e-8
COND_LIMIT = 1e12


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial regressors in the own state plus optional summaries.

    Parameters
    ----------
    degree : int
        Maximal total degree of the monomials in the own-state components.
    include_empirical_moments : bool
        Append the mean and second moment of the interaction cloud.
    include_lagged_state : bool
        Append the lagged state and its cross term with the current state.
    ridge : float or None
        Ridge parameter; ``None`` means ``1e-8 * M``.
    """

    degree: int = 3
    include_empirical_moments: bool = True
    include_lagged_state: bool = False
    ridge: Optional[float] = None

    def __post_init__(self):
        if self.degree < 0:
            raise ContractViolation("basis degree must be nonnegative")
        if self.ridge is not None and self.ridge < 0:
            raise ContractViolation("ridge must be nonnegative")

    def design(self, own, moments=None, lagged=None, extra=None) -> np.ndarray:
        """Design matrix without intercept, shape ``(n, p)``.

        ``own`` is ``(n, m)``; ``moments`` (``(n, 2)``-like cloud summaries),
        ``lagged`` (``(n, m)``) and ``extra`` (``(n, r)``) are optional blocks.
        """
        own = np.asarray(own, dtype=float)
        if own.ndim == 1:
            own = own[:, None]
        cols = []
        m = own.shape[1]
        for deg in range(1, self.degree + 1):
            for combo in _monomials(m, deg):
                cols.append(np.prod(own[:, combo], axis=1))
        if self.include_lagged_state and lagged is not None:
            lagged = np.asarray(lagged, dtype=float).reshape(own.shape[0], -1)
            cols.extend(lagged.T)
            cols.extend((own * lagged).T)
            cols.extend((lagged ** 2).T)
        if self.include_empirical_moments and moments is not None:
            cols.extend(np.asarray(moments, dtype=float).reshape(own.shape[0], -1).T)
        if extra is not None:
            cols.extend(np.asarray(extra, dtype=float).reshape(own.shape[0], -1).T)
        if not cols:
            return np.empty((own.shape[0], 0))
        return np.column_stack(cols)


def _monomials(m: int, deg: int):
    from itertools import combinations_with_replacement
    return [list(c) for c in combinations_with_replacement(range(m), deg)]


class LinearRegressor:
    """Ridge least squares with an unpenalized intercept.

    Columns are centered and scaled; columns with negligible spread are
    dropped, so constant regressors never cause rank loss.  With the exact
    intercept, fitted values always have the same sample mean as the target.
    """

    def __init__(self, ridge: Optional[float] = None, step: int = -1):
        self.ridge = ridge
        self.step = step

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        n = X.shape[0]
        if not np.all(np.isfinite(X)):
            raise SingularRegression(self.step, "non-finite regression data")
        self.mean_ = X.mean(axis=0) if X.shape[1] else np.zeros(0)
        scale = X.std(axis=0) if X.shape[1] else np.zeros(0)
        ref = np.maximum(np.abs(self.mean_), 1.0)
        self.keep_ = scale > 1e-10 * ref
        self.scale_ = np.where(self.keep_, scale, 1.0)
        Xs = (X[:, self.keep_] - self.mean_[self.keep_]) / self.scale_[self.keep_]
        self._fac = None
        p = Xs.shape[1]
        if p:
            lam = RIDGE_SCALE * n if self.ridge is None else self.ridge
            gram = Xs.T @ Xs + lam * np.eye(p)
            try:
                self._fac = linalg.cho_factor(gram, check_finite=False)
            except linalg.LinAlgError:
                raise SingularRegression(self.step) from None
            diag = np.diag(self._fac[0]) ** 2
            if diag.min() <= 0 or diag.max() / diag.min() > COND_LIMIT:
                raise SingularRegression(self.step)
        self._Xs = Xs
        self._solve(y)
        return self

    def _solve(self, y):
        Xs = self._Xs
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise SingularRegression(self.step, "non-finite regression data")
        y2 = y.reshape(Xs.shape[0], -1)
        constant = bool(np.all(y2 == y2[:1]))
        # a constant target is reproduced exactly rather than up to rounding
        self.intercept_ = y2[0].copy() if constant else y2.mean(axis=0)
        if self._fac is None or constant:
            self.coef_ = np.zeros((Xs.shape[1], y2.shape[1]))
        else:
            self.coef_ = linalg.cho_solve(self._fac, Xs.T @ (y2 - self.intercept_),
                                          check_finite=False)
        self.squeeze_ = y.ndim == 1

    def refit(self, y) -> "LinearRegressor":
        """New regressor on the same design with target ``y``, reusing the
        factorization."""
        if self._Xs is None:
            raise ContractViolation("refit needs the training design; it was released")
        new = LinearRegressor(self.ridge, self.step)
        new.mean_, new.keep_, new.scale_ = self.mean_, self.keep_, self.scale_
        new._Xs, new._fac = self._Xs, self._fac
        new._solve(y)
        return new

    def _std(self, X):
        X = np.asarray(X, dtype=float)
        return (X[:, self.keep_] - self.mean_[self.keep_]) / self.scale_[self.keep_]

    def predict(self, X=None):
        Xs = self._Xs if X is None else self._std(X)
        out = self.intercept_ + Xs @ self.coef_
        return out[:, 0] if self.squeeze_ else out

    def fitted(self):
        return self.predict(None)

    def release(self):
        # drop the training design once fitted values are no longer needed
        self._Xs = None
        self._fac = None
        return self


def r_squared(y, fit) -> float:
    y = np.asarray(y, dtype=float)
    ss = np.sum((y - y.mean()) ** 2)
    if ss <= 1e-300:
        return 1.0
    return float(1.0 - np.sum((y - fit) ** 2) / ss)


@dataclass
class BsdeSolution:
    """Output of the backward regression scheme.

    ``Y`` has shape ``(M, K+1)``, ``Z`` has shape ``(M, K, d)``.
    ``continuation[:, k]`` is the regressed ``E[Y_{k+1} | F_k]`` and
    ``driver[:, k]`` the generator value used at step ``k``.
    """

    Y: np.ndarray
    Z: np.ndarray
    Y0: float
    Y0_se: float
    continuation: np.ndarray
    driver: np.ndarray
    r2: np.ndarray
    residuals: np.ndarray
    z_models: List[LinearRegressor] = field(default_factory=list, repr=False)
    dt: float = 1.0

    def z_at(self, k: int, design) -> np.ndarray:
        """Evaluate the fitted ``Z_k`` regression at new design rows."""
        return np.asarray(self.z_models[k].predict(design)).reshape(len(design), -1)


def default_design(paths: PathEnsemble, basis: RegressionBasis):
    def design(k):
        return basis.design(paths.states[:, k, :])
    return design


def solve_bsde_regression(paths: PathEnsemble, terminal, generator: Callable,
                          basis: RegressionBasis = RegressionBasis(),
                          design: Optional[Callable[[int], np.ndarray]] = None,
                          z_clip: Optional[float] = None,
                          keep_models: bool = False) -> BsdeSolution:
    """Backward regression solve of ``Y = xi + int generator dt - int Z dW``.

    Parameters
    ----------
    paths : PathEnsemble
        Forward paths and Brownian increments under the base measure.
    terminal : array of shape (M,)
        Terminal condition; stored bitwise in ``Y[:, K]``.
    generator : callable
        ``generator(k, y, z)`` returning shape ``(M,)``; ``y`` is the
        continuation value at step ``k`` and ``z`` has shape ``(M, d)``.
    basis : RegressionBasis
    design : callable, optional
        ``design(k)`` returning the regressors at ``t_k``; defaults to the
        polynomial basis in the current state.
    z_clip : float, optional
        Clamp applied to ``z`` before it enters the generator.
    """
    M, K, d = paths.increments.shape
    dt = paths.grid.dt
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (M,):
        raise ContractViolation(f"terminal must have shape ({M},), got {terminal.shape}")
    if not np.all(np.isfinite(terminal)):
        raise NumericalAbort("non-finite terminal condition")
    if design is None:
        design = default_design(paths, basis)
    Y = np.empty((M, K + 1))
    Z = np.empty((M, K, d))
    cont = np.empty((M, K))
    drv = np.empty((M, K))
    r2 = np.empty(K)
    res = np.empty(K)
    models: List[Optional[LinearRegressor]] = [None] * K
    Y[:, K] = terminal
    pathwise = terminal.copy()
    for k in range(K - 1, -1, -1):
        D = design(k)
        yreg = LinearRegressor(basis.ridge, step=k).fit(D, Y[:, k + 1])
        yhat = yreg.fitted()
        dw = paths.increments[:, k, :]
        target = (Y[:, k + 1] - yhat)[:, None] * dw / dt
        zreg = yreg.refit(target)
        Z[:, k, :] = zreg.fitted()
        zin = Z[:, k, :] if z_clip is None else np.clip(Z[:, k, :], -z_clip, z_clip)
        gen = np.broadcast_to(np.asarray(generator(k, yhat, zin), dtype=float), (M,))
        if not np.all(np.isfinite(gen)):
            raise NumericalAbort(f"non-finite generator at time step {k}")
        Y[:, k] = yhat + gen * dt
        cont[:, k] = yhat
        drv[:, k] = gen
        pathwise += gen * dt
        r2[k] = r_squared(Y[:, k + 1], yhat)
        res[k] = np.mean(Y[:, k + 1] - Y[:, k] + gen * dt - np.einsum("pd,pd->p", Z[:, k, :], dw))
        if keep_models:
            models[k] = zreg.release()
    Y0 = float(Y[:, 0].mean())
    Y0_se = float(pathwise.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    return BsdeSolution(Y, Z, Y0, Y0_se, cont, drv, r2, res, models if keep_models else [], dt)


def martingale_residual_check(sol: BsdeSolution, paths: PathEnsemble,
                              generator: Optional[Callable] = None) -> float:
    """``max_k |mean(Y_{k+1} - Y_k + g_k dt - Z_k . dW_k)| / (1 + |Y0|)``.

    The generator is re-evaluated at the stored continuation values when
    given; otherwise the values recorded during the solve are used.
    """
    M, K, d = paths.increments.shape
    dt = paths.grid.dt
    worst = 0.0
    for k in range(K):
        if generator is None:
            gen = sol.driver[:, k]
        else:
            gen = np.broadcast_to(generator(k, sol.continuation[:, k], sol.Z[:, k, :]), (M,))
        r = np.mean(sol.Y[:, k + 1] - sol.Y[:, k] + gen * dt
                    - np.einsum("pd,pd->p", sol.Z[:, k, :], paths.increments[:, k, :]))
        worst = max(worst, abs(float(r)))
    return worst / (1.0 + abs(sol.Y0))
