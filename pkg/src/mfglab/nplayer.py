"""Particle solver for the symmetric N-player game.

Each Monte-Carlo scenario carries N interacting players.  A Picard loop
alternates a forward pass (players move with drift ``sigma b`` under the
current control field, i.e. under the equilibrium measure of that field) and
a pooled backward regression over all players with symmetric regressors: the
own state polynomial, the empirical mean and second moment of the N states,
and model-specific cross-sectional summaries.  Because the forward particles
already carry every player's drift, the backward equation only needs the
running reward as driver.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .bsde import LinearRegressor, RegressionBasis
from .core import EmpiricalMeasure, ModelSpec, PathPrefix, TimeGrid, best_response_fixed_point
from .errors import BudgetExceeded, ContractViolation, NonConvergence, NumericalAbort
from .metrics import w2sq_1d
from .paths import brownian_increments, reweighted_expectation

BUDGET_CAP = 2 * 10 ** 8
MAX_CROSS = 8


def default_scenarios(N: int, budget: int = 10 ** 4) -> int:
    return max(budget // N, 256)


class ZField:
    """Control field as a convex combination of fitted ``Z^{ii}`` regressions.

    Damped Picard updates mix the previous field with the new fit, so the
    field keeps a short list of (weight, per-step regressors).
    """

    def __init__(self, parts=None):
        self.parts = list(parts or [])

    def blend(self, models: Sequence[LinearRegressor], theta: float) -> "ZField":
        if not self.parts or theta >= 1.0:
            return ZField([(1.0, list(models))])
        return ZField([(w * (1.0 - theta), m) for w, m in self.parts] + [(theta, list(models))])

    def __call__(self, k: int, design: np.ndarray) -> np.ndarray:
        out = 0.0
        for w, models in self.parts:
            out = out + w * np.asarray(models[k].predict(design)).reshape(design.shape[0], -1)
        return out


@dataclass
class NPlayerSolution:
    """Equilibrium of the N-player game on ``M`` scenarios.

    Arrays are indexed ``[scenario, player, time, ...]``.
    """

    model: ModelSpec
    N: int
    grid: TimeGrid
    basis: RegressionBasis
    seed: int
    states: np.ndarray
    increments: np.ndarray
    actions: np.ndarray
    Y: np.ndarray
    continuation: np.ndarray
    Zdiag: np.ndarray
    rewards: np.ndarray
    Y0_players: np.ndarray
    Y0_se_players: np.ndarray
    Y0: float
    Y0_se: float
    iterations: int
    residuals: List[float] = field(default_factory=list)
    zfield: Optional[ZField] = field(default=None, repr=False)
    z_clip: Optional[float] = None
    _zsum: Optional[float] = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return self.states.shape[0]

    @property
    def spread(self) -> float:
        return float(self.Y0_players.max() - self.Y0_players.min())

    @property
    def z_sum_diagnostic(self) -> float:
        if self._zsum is None:
            self._zsum = zsum_diagnostic(self)
        return self._zsum

    def control_cloud(self, k: int) -> np.ndarray:
        """All players' equilibrium actions at step ``k`` across scenarios."""
        return self.actions[:, :, k].ravel()


def _design(model: ModelSpec, basis: RegressionBasis, prefix: PathPrefix, N: int,
            extra_own=None) -> np.ndarray:
    """Pooled design rows ``(M*N, p)`` for all players of all scenarios."""
    x = prefix.current
    M = x.shape[0]
    m = model.state_dim
    own = x.reshape(M * N, m)
    moments = lagged = extra = None
    if basis.include_empirical_moments and N > 1:
        mean = x.mean(axis=1, keepdims=True)
        sq = (x * x).mean(axis=1, keepdims=True)
        moments = np.broadcast_to(np.concatenate([mean, sq], axis=-1), (M, N, 2 * m)).reshape(M * N, -1)
    if model.lag > 0:
        lagged = prefix.lagged(model.lag).reshape(M * N, m)
    cols = []
    if model.interaction_features is not None and N > 1:
        meas = EmpiricalMeasure(model.features(prefix))
        inter = np.asarray(model.interaction_features(meas), dtype=float)
        cols.append(np.broadcast_to(inter.reshape(M, 1, -1), (M, N, inter.size // M)).reshape(M * N, -1))
    if extra_own is not None:
        cols.append(np.asarray(extra_own, dtype=float).reshape(M * N, -1))
    if cols:
        extra = np.concatenate(cols, axis=1)
    b = RegressionBasis(basis.degree, basis.include_empirical_moments,
                        model.lag > 0, basis.ridge)
    return b.design(own, moments=moments, lagged=lagged, extra=extra)


def _forward(model, grid, N, dW, x0, zfield: Optional[ZField], basis, z_clip):
    M = dW.shape[0]
    K, m = grid.steps, model.state_dim
    states = np.empty((M, N, K + 1, m))
    states[:, :, 0, :] = x0
    actions = np.empty((M, N, K + 1))
    a_o = model.action_set.a_o
    for k in range(K):
        t = grid.t(k)
        prefix = PathPrefix(states[:, :, : k + 1, :], grid.dt)
        if zfield is None:
            a = np.full((M, N), a_o)
        else:
            z = zfield(k, _design(model, basis, prefix, N)).reshape(M, N, -1)
            if z_clip is not None:
                z = np.clip(z, -z_clip, z_clip)
            a = best_response_fixed_point(model, t, prefix, z)
        meas = EmpiricalMeasure(model.features(prefix), a)
        b = np.asarray(model.drift(t, prefix, meas, a), dtype=float)
        sig = model.volatility(t, prefix)
        states[:, :, k + 1, :] = states[:, :, k, :] + np.einsum(
            "snmd,snd->snm", sig, b * grid.dt + dW[:, :, k, :])
        actions[:, :, k] = a
    if not np.all(np.isfinite(states)):
        raise NumericalAbort("non-finite particle states")
    actions[:, :, K] = actions[:, :, K - 1]
    return states, actions


def _backward(model, grid, N, states, actions, dW, basis):
    M, _, K1, m = states.shape
    K = K1 - 1
    d = dW.shape[-1]
    dt = grid.dt
    Y = np.empty((M, N, K + 1))
    cont = np.empty((M, N, K))
    Z = np.empty((M, N, K, d))
    models: List[Optional[LinearRegressor]] = [None] * K
    pre_K = PathPrefix(states, dt)
    meas_K = EmpiricalMeasure(model.features(pre_K), actions[:, :, K])
    Y[:, :, K] = np.broadcast_to(model.terminal_reward(pre_K, meas_K), (M, N))
    rewards = Y[:, :, K].copy()
    for k in range(K - 1, -1, -1):
        prefix = PathPrefix(states[:, :, : k + 1, :], dt)
        D = _design(model, basis, prefix, N)
        target = Y[:, :, k + 1].reshape(M * N)
        yreg = LinearRegressor(basis.ridge, step=k).fit(D, target)
        yhat = yreg.fitted()
        ztarget = (target - yhat)[:, None] * dW[:, :, k, :].reshape(M * N, d) / dt
        zreg = yreg.refit(ztarget)
        Z[:, :, k, :] = zreg.fitted().reshape(M, N, d)
        models[k] = zreg.release()
        a = actions[:, :, k]
        meas = EmpiricalMeasure(model.features(prefix), a)
        f = np.broadcast_to(model.running_reward(grid.t(k), prefix, meas, a), (M, N))
        if not np.all(np.isfinite(f)):
            raise NumericalAbort(f"non-finite running reward at time step {k}")
        cont[:, :, k] = yhat.reshape(M, N)
        Y[:, :, k] = cont[:, :, k] + f * dt
        rewards += f * dt
    return Y, cont, Z, models, rewards


def _best_responses(model, grid, N, states, zfield, basis, z_clip):
    M = states.shape[0]
    out = np.empty((M, N, grid.steps))
    for k in range(grid.steps):
        prefix = PathPrefix(states[:, :, : k + 1, :], grid.dt)
        z = zfield(k, _design(model, basis, prefix, N)).reshape(M, N, -1)
        if z_clip is not None:
            z = np.clip(z, -z_clip, z_clip)
        out[:, :, k] = best_response_fixed_point(model, grid.t(k), prefix, z)
    return out


def solve_nplayer_particle(model: ModelSpec, N: int, grid: TimeGrid, M: Optional[int] = None,
                           seed: int = 0, basis: RegressionBasis = RegressionBasis(),
                           tol_fp: float = 1e-6, max_iter: int = 30, X_0=0.0,
                           damping: float = 1.0, z_clip: Optional[float] = 10.0,
                           budget_cap: int = BUDGET_CAP, threads: int = 1,
                           increments: Optional[np.ndarray] = None) -> NPlayerSolution:
    """Symmetric N-player equilibrium by forward-backward Picard iteration.

    Parameters
    ----------
    N : int
        Players per scenario.
    M : int, optional
        Scenarios; defaults to ``max(10**4 // N, 256)``.
    X_0 : float or array
        Common initial state, or per-player initial states of shape ``(N, m)``.
    damping : float
        Weight of the new control field in each update.  When the sup-norm
        residual stops contracting (factor above 0.9) the weight drops to 0.5.
    increments : array, optional
        Brownian increments of shape ``(M, N, K, d)`` (overrides the seed).
    """
    if N < 1:
        raise ContractViolation("N must be >= 1")
    if model.nplayer_best_response is None:
        raise ContractViolation("the particle solver needs a closed-form N-player best response")
    M = default_scenarios(N) if M is None else int(M)
    if N * M * grid.steps > budget_cap:
        raise BudgetExceeded(f"N*M*K = {N * M * grid.steps} exceeds the cap {budget_cap}")
    m, d = model.state_dim, model.noise_dim
    if increments is None:
        dW = brownian_increments(seed, M * N, grid, d, threads).reshape(M, N, grid.steps, d)
    else:
        dW = np.asarray(increments, dtype=float)
        if dW.shape != (M, N, grid.steps, d):
            raise ContractViolation(f"increments must have shape {(M, N, grid.steps, d)}")
    x0 = np.asarray(X_0, dtype=float)
    x0 = np.broadcast_to(x0.reshape(N, m) if x0.size == N * m and N > 1 else
                         np.broadcast_to(x0, (m,)), (N, m))

    zfield: Optional[ZField] = None
    residuals: List[float] = []
    theta = damping
    for it in range(1, max_iter + 1):
        states, actions = _forward(model, grid, N, dW, x0, zfield, basis, z_clip)
        Y, cont, Z, models, rewards = _backward(model, grid, N, states, actions, dW, basis)
        candidate = (zfield or ZField()).blend(models, 1.0)
        br = _best_responses(model, grid, N, states, candidate, basis, z_clip)
        res = float(np.max(np.abs(br - actions[:, :, :-1])))
        residuals.append(res)
        if res <= tol_fp:
            break
        if len(residuals) > 1 and res > 0.9 * residuals[-2]:
            theta = min(theta, 0.5)
        zfield = (zfield or ZField()).blend(models, theta)
    else:
        raise NonConvergence(f"N-player fixed point did not reach tol_fp={tol_fp} in "
                             f"{max_iter} iterations (last residual {residuals[-1]:.3g})")

    Y0_players = Y[:, :, 0].mean(axis=0)
    Y0_se_players = rewards.std(axis=0, ddof=1) / math.sqrt(M) if M > 1 else np.zeros(N)
    scen = rewards.mean(axis=1)
    Y0_se = float(scen.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0
    return NPlayerSolution(model, N, grid, basis, int(seed), states, dW, actions, Y, cont, Z,
                           rewards, Y0_players, Y0_se_players, float(Y[:, :, 0].mean()), Y0_se,
                           it, residuals, (zfield or ZField()).blend(models, 1.0), z_clip)


def zsum_diagnostic(sol: NPlayerSolution) -> float:
    """Estimate of ``E[sum_j int |Z^{ij}|^2 dt]`` for a representative player.

    The own term uses the fitted ``Z^{ii}``.  Cross terms ``Z^{ij}`` are
    regressions of the martingale increment of player i against the noise of
    player ``j = i + s (mod N)`` for ``s = 1..min(N, 8) - 1``, with the state of
    player j added to the regressors; their average is scaled by ``N - 1``.
    """
    model, grid, N = sol.model, sol.grid, sol.N
    M, _, K1, m = sol.states.shape
    K, d, dt = K1 - 1, sol.increments.shape[-1], grid.dt
    shifts = list(range(1, min(N, MAX_CROSS)))
    total = 0.0
    for k in range(K):
        own_sq = np.mean(np.sum(sol.Zdiag[:, :, k, :] ** 2, axis=-1))
        cross = 0.0
        if shifts:
            prefix = PathPrefix(sol.states[:, :, : k + 1, :], dt)
            resid = (sol.Y[:, :, k + 1] - sol.continuation[:, :, k])
            x = prefix.current
            for s in shifts:
                xj = np.roll(x, -s, axis=1)
                D = _design(model, sol.basis, prefix, N,
                            extra_own=np.concatenate([xj, xj * xj, xj * x], axis=-1))
                dwj = np.roll(sol.increments[:, :, k, :], -s, axis=1)
                target = (resid[..., None] * dwj).reshape(M * N, d) / dt
                fit = LinearRegressor(sol.basis.ridge, step=k).fit(D, target).fitted()
                cross += np.mean(np.sum(np.asarray(fit).reshape(M * N, d) ** 2, axis=-1))
            cross *= (N - 1) / len(shifts)
        total += (own_sq + cross) * dt
    return float(total)


# -- comparisons with the mean-field limit ------------------------------------


@dataclass
class CoupledComparison:
    """N-player system and i.i.d. mean-field copies driven by the same noise."""

    gap: float
    gap_se: float
    control_w2: float
    control_w2_se: float
    chaos_w2: float
    chaos_w2_se: float
    copy_states: np.ndarray = field(repr=False)
    copy_actions: np.ndarray = field(repr=False)


def coupled_comparison(nsol: NPlayerSolution, msol, n_batches: int = 10) -> CoupledComparison:
    """Value gap, control-law distance and chaos distance against the limit.

    Mean-field copies start from the players' initial states and use the
    players' Brownian increments (Brownian under the N-player equilibrium
    measure) with the equilibrium feedback of ``msol``.  Their rewards are
    evaluated against the empirical measure of the N copies in the same
    scenario; for rewards affine in the measure this is an unbiased control
    variate for the mean-field value, and the difference to the players'
    rewards has a much smaller variance than either term.
    """
    model, grid, N = nsol.model, nsol.grid, nsol.N
    M, _, K1, m = nsol.states.shape
    K, dt = K1 - 1, grid.dt
    inc = nsol.increments.reshape(M * N, K, -1)
    x0 = nsol.states[:, :, 0, :].reshape(M * N, m)
    cs, ca = _copies(msol, inc, x0)
    cs = cs.reshape(M, N, K1, m)
    ca = ca.reshape(M, N, K1)
    rew = np.zeros((M, N))
    for k in range(K):
        prefix = PathPrefix(cs[:, :, : k + 1, :], dt)
        meas = EmpiricalMeasure(model.features(prefix), ca[:, :, k])
        rew += np.broadcast_to(model.running_reward(grid.t(k), prefix, meas, ca[:, :, k]),
                               (M, N)) * dt
    pre_K = PathPrefix(cs, dt)
    rew += np.broadcast_to(model.terminal_reward(
        pre_K, EmpiricalMeasure(model.features(pre_K), ca[:, :, K])), (M, N))
    diff = (nsol.rewards - rew).mean(axis=1)
    gap = float(diff.mean())
    var = diff.var(ddof=1) / M if M > 1 else 0.0
    if not model.measure_affine:
        scen = rew.mean(axis=1)
        gap += float(scen.mean()) - msol.Y0
        var += scen.var(ddof=1) / M + msol.Y0_se ** 2
    cw, cw_se = _batched(lambda idx: sum(
        w2sq_1d(nsol.actions[idx, :, k].ravel(), ca[idx, :, k].ravel()) for k in range(K)) * dt,
        M, n_batches)
    sq = np.sum((nsol.states - cs) ** 2, axis=-1)
    per_k = sq.mean(axis=(0, 1))
    k_star = int(np.argmax(per_k))
    per_scen = sq[:, :, k_star].mean(axis=1)
    chaos_se = float(per_scen.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0
    return CoupledComparison(gap, math.sqrt(var), cw, cw_se, float(per_k[k_star]), chaos_se, cs, ca)


def _copies(msol, increments, x0):
    model, grid = msol.model, msol.grid
    n, K, _ = increments.shape
    m = model.state_dim
    states = np.empty((n, K + 1, m))
    states[:, 0, :] = x0
    actions = np.empty((n, K + 1))
    for k in range(K):
        prefix = PathPrefix(states[:, : k + 1, :], grid.dt)
        a = msol.control(k, prefix)
        b = model.drift(grid.t(k), prefix, msol.flow[k], a)
        sig = model.volatility(grid.t(k), prefix)
        states[:, k + 1, :] = states[:, k, :] + np.einsum("pmd,pd->pm", sig,
                                                          b * grid.dt + increments[:, k, :])
        actions[:, k] = a
    actions[:, K] = actions[:, K - 1]
    return states, actions


def _batched(fn, M: int, n_batches: int):
    full = float(fn(np.arange(M)))
    nb = min(n_batches, M)
    if nb < 2:
        return full, 0.0
    vals = np.array([fn(idx) for idx in np.array_split(np.arange(M), nb)])
    return full, float(vals.std(ddof=1) / math.sqrt(nb))


def reweighted_value(nsol: NPlayerSolution, M: int, seed: int) -> tuple:
    """Independent estimate of the players' value in the weak formulation.

    Simulates driftless particles under the base measure, applies the
    equilibrium feedback of the solution, and reweights the total reward of
    each player by the joint Girsanov density of all N drifts.  Returns
    per-player ``(estimates, standard_errors)``.
    """
    model, grid, N = nsol.model, nsol.grid, nsol.N
    K, m, d, dt = grid.steps, model.state_dim, model.noise_dim, grid.dt
    dW = brownian_increments(seed, M * N, grid, d, stream=2).reshape(M, N, K, d)
    states = np.empty((M, N, K + 1, m))
    states[:, :, 0, :] = nsol.states[0, :, 0, :]
    for k in range(K):
        sig = model.volatility(grid.t(k), PathPrefix(states[:, :, : k + 1, :], dt))
        states[:, :, k + 1, :] = states[:, :, k, :] + np.einsum("snmd,snd->snm", sig, dW[:, :, k, :])
    logw = np.zeros((M, K + 1))
    running = np.zeros((M, N))
    for k in range(K):
        t = grid.t(k)
        prefix = PathPrefix(states[:, :, : k + 1, :], dt)
        z = nsol.zfield(k, _design(model, nsol.basis, prefix, N)).reshape(M, N, -1)
        if nsol.z_clip is not None:
            z = np.clip(z, -nsol.z_clip, nsol.z_clip)
        a = best_response_fixed_point(model, t, prefix, z)
        meas = EmpiricalMeasure(model.features(prefix), a)
        b = np.asarray(model.drift(t, prefix, meas, a), dtype=float)
        f = np.broadcast_to(model.running_reward(t, prefix, meas, a), (M, N))
        running += np.exp(logw[:, k])[:, None] * f * dt
        logw[:, k + 1] = logw[:, k] + np.sum(b * dW[:, :, k, :] - 0.5 * b * b * dt, axis=(1, 2))
    pre_K = PathPrefix(states, dt)
    g = np.broadcast_to(model.terminal_reward(
        pre_K, EmpiricalMeasure(model.features(pre_K))), (M, N))
    rew = running + np.exp(logw[:, K])[:, None] * g
    est = np.empty(N)
    se = np.empty(N)
    for i in range(N):
        est[i], se[i] = reweighted_expectation(rew[:, i], None)
    return est, se
