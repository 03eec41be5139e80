"""Built-in symmetric models: case study, price impact and delayed dynamics."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .core import ActionSet, EmpiricalMeasure, ModelSpec, PathPrefix

FUNCTIONS: dict[str, Callable] = {
    "zero": np.zeros_like,
    "identity": lambda x: np.asarray(x, dtype=float),
    "tanh": np.tanh,
    "sin": np.sin,
    "cos": np.cos,
    "neg_tanh_sq": lambda x: -np.tanh(x) ** 2,
    "logcosh": lambda x: np.logaddexp(x, -x) - np.log(2.0),
}


def resolve_function(spec, scale: float = 1.0) -> Callable:
    """Look up a named scalar function, optionally scaled."""
    if callable(spec):
        fn = spec
    else:
        try:
            fn = FUNCTIONS[str(spec).strip().lower()]
        except KeyError:
            raise ValueError(f"unknown function name {spec!r}; known: {sorted(FUNCTIONS)}") from None
    if scale == 1.0:
        return fn
    return lambda x: scale * fn(x)


def _constant_volatility(sigma: float):
    def vol(t, path: PathPrefix):
        return np.full(path.current.shape[:-1] + (1, 1), float(sigma))
    return vol


def _scalar(a):
    return np.asarray(a, dtype=float)


def case_study(kappa1: float = 1.0, kappa2: float = 0.0, k: float = 0.0, sigma: float = 1.0,
               f=np.tanh, g=None, a_min: float = -1.0, a_max: float = 1.0,
               a_ref: Optional[float] = None) -> ModelSpec:
    """Linear-quadratic interaction game with mean-reverting drift.

    Drift ``b = a - k x``; running reward
    ``kappa1 E_xi[f(X)] + kappa2 E_xi[a] - a^2 / 2``; terminal reward ``g(X_T)``.
    The mean-field maximizer is the projection ``P_A(z)`` and the N-player
    best response is ``P_A(z_ii + kappa2 / N)``.
    """
    f = resolve_function(f)
    g = resolve_function("zero" if g is None else g)
    A = ActionSet.interval(a_min, a_max, a_ref)
    lo, hi = A.low[0], A.high[0]

    def drift(t, path, xi, a):
        return (_scalar(a) - k * path.current[..., 0])[..., None]

    def running(t, path, xi: EmpiricalMeasure, a):
        a = _scalar(a)
        r = -0.5 * a * a
        if kappa1 != 0.0:
            r = r + kappa1 * xi.state_expect(f)
        if kappa2 != 0.0:
            r = r + kappa2 * xi.action_expect()
        return r

    def terminal(path, mu):
        return g(path.current[..., 0])

    def maximizer(t, path, xi, z):
        return np.clip(np.asarray(z, dtype=float)[..., 0], lo, hi)

    def best_response(t, path, measure, z_own, n_players):
        return np.clip(np.asarray(z_own, dtype=float)[..., 0] + kappa2 / n_players, lo, hi)

    def interaction(measure: EmpiricalMeasure):
        return measure.state_expect(f)

    return ModelSpec(
        name="case_study", state_dim=1, noise_dim=1, action_set=A,
        volatility=_constant_volatility(sigma), drift=drift, running_reward=running,
        terminal_reward=terminal, maximizer=maximizer, nplayer_best_response=best_response,
        interaction_features=interaction if kappa1 != 0.0 else None,
        lipschitz=max(1.0, abs(kappa1), abs(kappa2), abs(k)),
        params=dict(kappa1=kappa1, kappa2=kappa2, k=k, sigma=sigma,
                    R_N_scale=abs(kappa2)),
    )


def price_impact(gamma0: float = 0.5, k0: float = 0.2, g0: float = 0.5, sigma: float = 1.0,
                 gamma_fun=None, k_fun=None, g_fun=None,
                 a_min: float = -2.0, a_max: float = 2.0,
                 a_ref: Optional[float] = None) -> ModelSpec:
    """Trading game with permanent price impact.

    The inventory moves with the trading rate (``sigma b = a``).  Running
    reward ``gamma(x) E_nu[a] - a^2/2 - k(x)``: the impact sensitivity times
    the mean trading rate of the population, minus quadratic trading cost and
    inventory penalty.  Defaults ``gamma(x) = gamma0 (1 + tanh(x)/2)``,
    ``k(x) = k0 log cosh(x)`` and ``g(x) = -g0 tanh(x)^2``.
    """
    if gamma_fun is None:
        gamma_fun = lambda x: gamma0 * (1.0 + 0.5 * np.tanh(x))
    if k_fun is None:
        k_fun = lambda x: k0 * (np.logaddexp(x, -x) - np.log(2.0))
    if g_fun is None:
        g_fun = lambda x: -g0 * np.tanh(x) ** 2
    A = ActionSet.interval(a_min, a_max, a_ref)
    lo, hi = A.low[0], A.high[0]

    def drift(t, path, xi, a):
        return (_scalar(a) / sigma)[..., None] + np.zeros(path.current.shape[:-1] + (1,))

    def running(t, path, xi: EmpiricalMeasure, a):
        a = _scalar(a)
        x = path.current[..., 0]
        return gamma_fun(x) * xi.action_expect() - 0.5 * a * a - k_fun(x)

    def terminal(path, mu):
        return g_fun(path.current[..., 0])

    def maximizer(t, path, xi, z):
        return np.clip(np.asarray(z, dtype=float)[..., 0] / sigma, lo, hi)

    def best_response(t, path, measure, z_own, n_players):
        x = path.current[..., 0]
        return np.clip(np.asarray(z_own, dtype=float)[..., 0] / sigma + gamma_fun(x) / n_players,
                       lo, hi)

    def interaction(measure: EmpiricalMeasure):
        return measure.state_expect(np.tanh)

    return ModelSpec(
        name="price_impact", state_dim=1, noise_dim=1, action_set=A,
        volatility=_constant_volatility(sigma), drift=drift, running_reward=running,
        terminal_reward=terminal, maximizer=maximizer, nplayer_best_response=best_response,
        interaction_features=interaction,
        lipschitz=max(1.0, 1.5 * abs(gamma0), abs(k0), 2.0 * abs(g0)),
        params=dict(gamma0=gamma0, k0=k0, g0=g0, sigma=sigma, R_N_scale=1.5 * abs(gamma0)),
    )


def delay_toy(tau: float = 0.25, kappa: float = 0.5, g_scale: float = 0.5, sigma: float = 1.0,
              a_min: float = -1.0, a_max: float = 1.0,
              a_ref: Optional[float] = None) -> ModelSpec:
    """Game whose coefficients read the state delayed by ``tau``.

    With ``y = X_{t - tau}`` (zero before time 0) and ``m`` the population
    mean of the delayed state: drift ``b = a``, running reward
    ``-a^2/2 + kappa cos(y - m)`` and terminal reward ``g_scale tanh(X_{T - tau})``.
    Measures carry the feature pair (current state, delayed state).
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    A = ActionSet.interval(a_min, a_max, a_ref)
    lo, hi = A.low[0], A.high[0]

    def features(path: PathPrefix):
        return np.concatenate([path.current, path.lagged(tau)], axis=-1)

    def drift(t, path, xi, a):
        return _scalar(a)[..., None] + np.zeros(path.current.shape[:-1] + (1,))

    def running(t, path, xi: EmpiricalMeasure, a):
        a = _scalar(a)
        y = path.lagged(tau)[..., 0]
        return -0.5 * a * a + kappa * np.cos(y - xi.state_expect(column=1))

    def terminal(path, mu):
        return g_scale * np.tanh(path.lagged(tau)[..., 0])

    def maximizer(t, path, xi, z):
        return np.clip(np.asarray(z, dtype=float)[..., 0], lo, hi)

    def best_response(t, path, measure, z_own, n_players):
        return np.clip(np.asarray(z_own, dtype=float)[..., 0], lo, hi)

    def interaction(measure: EmpiricalMeasure):
        return measure.state_expect(column=1)

    return ModelSpec(
        name="delay_toy", state_dim=1, noise_dim=1, action_set=A,
        volatility=_constant_volatility(sigma), drift=drift, running_reward=running,
        terminal_reward=terminal, maximizer=maximizer, nplayer_best_response=best_response,
        features=features, interaction_features=interaction, lag=float(tau),
        measure_affine=False, lipschitz=max(1.0, abs(kappa), abs(g_scale)),
        params=dict(tau=tau, kappa=kappa, g_scale=g_scale, sigma=sigma, R_N_scale=0.0),
    )


BUILTIN_MODELS = {"case_study": case_study, "price_impact": price_impact, "delay_toy": delay_toy}
