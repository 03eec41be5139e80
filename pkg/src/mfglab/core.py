"""Domain types, the game-model interface and Hamiltonian maximization.

Coefficients of a model are vectorized callables.  A state path is handed to
them as a :class:`PathPrefix` holding the grid history up to the current
time, and a measure is handed as an :class:`EmpiricalMeasure`, a weighted
cloud of (state feature, action) atoms.  Leading batch dimensions are free:
a prefix with history of shape ``(M, k+1, m)`` pairs with a single cloud of
shape ``(n, q)``, while a batch of N-player scenarios uses histories of shape
``(M, N, k+1, m)`` together with per-scenario clouds of shape ``(M, N, q)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import ContractViolation, NonConvergence

N_GRID = 64
TOL_ARGMAX = 1e-8
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k * T / K`` on ``[0, T]``."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ContractViolation(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ContractViolation(f"steps must be an integer >= 1, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.horizon
        return t

    def t(self, k: int) -> float:
        return self.horizon if k == self.steps else k * self.dt


@dataclass(frozen=True)
class ActionSet:
    """Closed box ``[low, high]`` with a reference action ``a_o``.

    A one-dimensional box is the scalar interval case used by every solver.
    """

    low: tuple
    high: tuple
    reference: tuple

    def __post_init__(self):
        low = tuple(float(v) for v in np.atleast_1d(self.low))
        high = tuple(float(v) for v in np.atleast_1d(self.high))
        ref = self.reference
        if ref is None:
            ref = tuple(min(max(0.0, lo), hi) for lo, hi in zip(low, high))
        ref = tuple(float(v) for v in np.atleast_1d(ref))
        if not (len(low) == len(high) == len(ref)) or len(low) == 0:
            raise ContractViolation("action bounds and reference must share one dimension")
        if not all(np.isfinite(low + high)):
            raise ContractViolation("action set must be bounded")
        if any(lo > hi for lo, hi in zip(low, high)):
            raise ContractViolation("action set is empty: low > high")
        if any(not (lo <= r <= hi) for lo, r, hi in zip(low, ref, high)):
            raise ContractViolation("reference action a_o must lie in A")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        object.__setattr__(self, "reference", ref)

    @classmethod
    def interval(cls, a_min: float, a_max: float, reference: Optional[float] = None):
        return cls((a_min,), (a_max,), None if reference is None else (reference,))

    @property
    def dim(self) -> int:
        return len(self.low)

    @property
    def is_interval(self) -> bool:
        return self.dim == 1

    @property
    def a_o(self):
        return self.reference[0] if self.is_interval else np.array(self.reference)

    def contains(self, a, atol: float = 0.0) -> bool:
        a = np.asarray(a, dtype=float)
        lo, hi = self._bounds(a)
        return bool(np.all((a >= lo - atol) & (a <= hi + atol)))

    def _bounds(self, v):
        if self.is_interval:
            return self.low[0], self.high[0]
        if v.shape[-1:] != (self.dim,):
            raise ContractViolation(f"expected trailing action dimension {self.dim}, got {v.shape}")
        return np.array(self.low), np.array(self.high)


def project_to_A(A: ActionSet, v):
    """Componentwise clamp of ``v`` onto the box ``A``."""
    v = np.asarray(v, dtype=float)
    lo, hi = A._bounds(v)
    out = np.minimum(np.maximum(v, lo), hi)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PathPrefix:
    """Grid history ``X_{t_0}, ..., X_{t_k}`` of one or many paths.

    ``history`` has shape ``(..., k+1, m)``.
    """

    history: np.ndarray
    dt: float

    @property
    def k(self) -> int:
        return self.history.shape[-2] - 1

    @property
    def t(self) -> float:
        return self.k * self.dt

    @property
    def current(self) -> np.ndarray:
        return self.history[..., -1, :]

    def lagged(self, tau: float) -> np.ndarray:
        """State at ``t - tau`` with left-constant interpolation, zero before time 0."""
        if tau < 0:
            raise ContractViolation("lag must be nonnegative")
        s = self.t - tau
        if s < -1e-12 * max(1.0, tau):
            return np.zeros_like(self.current)
        j = int(np.floor(s / self.dt + 1e-9))
        return self.history[..., min(max(j, 0), self.k), :]

    def running_max(self) -> np.ndarray:
        return self.history.max(axis=-2)


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted cloud of (state feature, action) atoms.

    ``features`` has shape ``(..., n, q)``; ``actions`` (scalar actions) has
    shape ``(..., n)``; ``weights`` is ``None`` for the uniform measure.
    Expectations are self-normalized and keep a singleton atom axis so that
    they broadcast against per-path arrays.
    """

    features: np.ndarray
    actions: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    @classmethod
    def point_mass(cls, feature, action=None):
        feat = np.asarray(feature, dtype=float).reshape(1, -1)
        act = None if action is None else np.array([float(action)])
        return cls(feat, act)

    @property
    def size(self) -> int:
        return self.features.shape[-2]

    def expect(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if self.weights is None:
            return values.mean(axis=-1, keepdims=True)
        w = self.weights
        return (w * values).sum(axis=-1, keepdims=True) / w.sum(axis=-1, keepdims=True)

    def state_expect(self, fn=None, column: int = 0) -> np.ndarray:
        x = self.features[..., column]
        return self.expect(x if fn is None else fn(x))

    def action_expect(self, fn=None) -> np.ndarray:
        if self.actions is None:
            raise ContractViolation("measure carries no action marginal")
        return self.expect(self.actions if fn is None else fn(self.actions))

    def with_actions(self, actions) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.features, np.asarray(actions, dtype=float), self.weights)

    def second_moment(self, column: int = 0) -> float:
        return float(np.asarray(self.state_expect(np.square, column)).mean())


def _current_state_features(path: PathPrefix) -> np.ndarray:
    return path.current


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients of a symmetric weak-formulation game.

    Callable signatures (all vectorized over leading batch axes):

    * ``volatility(t, path) -> (..., m, d)``
    * ``drift(t, path, xi, a) -> (..., d)``; the state moves by ``sigma @ b``
      under the controlled measure
    * ``running_reward(t, path, xi, a) -> (...)``
    * ``terminal_reward(path, mu) -> (...)``
    * ``maximizer(t, path, xi, z) -> (...)``, optional closed form of the
      argmax of the Hamiltonian
    * ``nplayer_best_response(t, path, measure, z_own, n_players)``, optional
      closed-form per-player best response in the N-player game
    * ``features(path) -> (..., q)``, the state feature stored in measures
    * ``interaction_features(measure) -> (..., r)``, cross-sectional summaries
      used as regressors by the particle solver
    """

    name: str
    state_dim: int
    noise_dim: int
    action_set: ActionSet
    volatility: Callable
    drift: Callable
    running_reward: Callable
    terminal_reward: Callable
    maximizer: Optional[Callable] = None
    nplayer_best_response: Optional[Callable] = None
    features: Callable = _current_state_features
    interaction_features: Optional[Callable] = None
    lag: float = 0.0
    measure_affine: bool = True
    lipschitz: float = 1.0
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.state_dim < 1 or self.noise_dim < 1:
            raise ContractViolation("state and noise dimensions must be >= 1")
        if self.lag < 0:
            raise ContractViolation("lag must be nonnegative")

    @property
    def feature_dim(self) -> int:
        return self.state_dim * (2 if self.lag > 0 else 1)


def _check_z(model: ModelSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 0 or z.shape[-1] != model.noise_dim:
        raise ContractViolation(
            f"z must have trailing dimension d={model.noise_dim}, got shape {z.shape}")
    return z


def hamiltonian(model: ModelSpec, t, x: PathPrefix, xi: EmpiricalMeasure, z, a):
    """``h = b(t, x, xi, a) . z + f(t, x, xi, a)``."""
    z = _check_z(model, z)
    a = np.asarray(a, dtype=float)
    b = model.drift(t, x, xi, a)
    return np.sum(b * z, axis=-1) + model.running_reward(t, x, xi, a)


def _broadcast_shape(*arrays):
    return np.broadcast_shapes(*(np.shape(v) for v in arrays))


def maximize_scalar(objective, low: float, high: float, shape, n_grid: int = N_GRID,
                    tol: float = TOL_ARGMAX):
    """Vectorized maximization of ``objective(a)`` over ``a in [low, high]``.

    Grid search on ``n_grid`` points followed by golden-section refinement of
    the bracket around the best grid point.  Ties go to the smallest action.
    Returns the maximizer (array of ``shape``) and its objective value.
    """
    if high - low <= tol:
        a = np.full(shape, low)
        return a, np.broadcast_to(objective(a), shape).copy()
    grid = np.linspace(low, high, n_grid)
    best_val = np.broadcast_to(objective(np.full(shape, grid[0])), shape).astype(float)
    best_idx = np.zeros(shape, dtype=int)
    for j, g in enumerate(grid[1:], 1):
        val = np.broadcast_to(objective(np.full(shape, g)), shape)
        better = val > best_val + 1e-15 * np.abs(best_val).clip(1.0)
        best_val = np.where(better, val, best_val)
        best_idx = np.where(better, j, best_idx)
    lo = grid[np.maximum(best_idx - 1, 0)]
    hi = grid[np.minimum(best_idx + 1, n_grid - 1)]
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc = np.broadcast_to(objective(c), shape)
    fd = np.broadcast_to(objective(d), shape)
    while np.max(hi - lo) > tol:
        left = fc >= fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        new_c = hi - _GOLDEN * (hi - lo)
        new_d = lo + _GOLDEN * (hi - lo)
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        probe = np.where(left, c_next, d_next)
        fp = np.broadcast_to(objective(probe), shape)
        fc_next = np.where(left, fp, fd)
        fd_next = np.where(left, fc, fp)
        c, d, fc, fd = c_next, d_next, fc_next, fd_next
    # golden search on a non-concave bracket can miss; fall back to the grid
    refined = 0.5 * (lo + hi)
    f_ref = np.broadcast_to(objective(refined), shape)
    use_ref = f_ref > best_val
    a = np.where(use_ref, refined, grid[best_idx])
    return a, np.where(use_ref, f_ref, best_val)


def argmax_hamiltonian(model: ModelSpec, t, x: PathPrefix, xi: EmpiricalMeasure, z,
                       n_grid: int = N_GRID, tol: float = TOL_ARGMAX,
                       use_closed_form: bool = True):
    """Maximizer of the Hamiltonian over the action set.

    Uses ``model.maximizer`` when present; otherwise requires an interval
    action set and runs grid plus golden-section search.
    """
    z = _check_z(model, z)
    if use_closed_form and model.maximizer is not None:
        return model.maximizer(t, x, xi, z)
    A = model.action_set
    if not A.is_interval:
        raise ContractViolation("numerical argmax needs an interval action set")
    shape = np.shape(hamiltonian(model, t, x, xi, z, np.full(z.shape[:-1], A.low[0])))
    a, _ = maximize_scalar(lambda a: hamiltonian(model, t, x, xi, z, a),
                           A.low[0], A.high[0], shape, n_grid, tol)
    return a


def max_hamiltonian(model: ModelSpec, t, x, xi, z):
    """``H = sup_a h`` together with the maximizer."""
    a = argmax_hamiltonian(model, t, x, xi, z)
    return hamiltonian(model, t, x, xi, z, a), a


def _player_measure(model, x: PathPrefix, actions):
    return EmpiricalMeasure(model.features(x), actions)


def best_response_fixed_point(model: ModelSpec, t, x_vec: PathPrefix, z_mat,
                              damping: float = 1.0, max_iter: int = 100,
                              tol_fp: float = 1e-6, actions0=None):
    """Fixed point of the N-player best-response map.

    ``x_vec`` holds the N players along axis ``-3`` of its history (shape
    ``(..., N, k+1, m)``).  ``z_mat`` is either the full matrix of shape
    ``(..., N, N, d)`` or only its diagonal ``(..., N, d)`` when the model
    supplies a closed-form best response.
    """
    n = x_vec.history.shape[-3]
    z_mat = _check_z(model, z_mat)
    A = model.action_set
    if model.nplayer_best_response is not None:
        if z_mat.ndim >= 3 and z_mat.shape[-3:-1] == (n, n):
            z_own = np.diagonal(z_mat, axis1=-3, axis2=-2)
            z_own = np.moveaxis(z_own, -1, -2)
        else:
            z_own = z_mat

        def br(a):
            return model.nplayer_best_response(t, x_vec, _player_measure(model, x_vec, a), z_own, n)
    else:
        if not A.is_interval:
            raise ContractViolation("numerical best response needs an interval action set")
        if z_mat.shape[-3:-1] != (n, n):
            raise ContractViolation("generic best response needs the full N x N matrix of z")
        feats = model.features(x_vec)

        def row_value(i, a, ai):
            acts = a.copy()
            acts[..., i] = ai
            meas = EmpiricalMeasure(feats, acts)
            b = model.drift(t, x_vec, meas, acts)
            f = model.running_reward(t, x_vec, meas, acts)
            return f[..., i] + np.einsum("...jd,...jd->...", b, z_mat[..., i, :, :])

        def br(a):
            out = np.empty_like(a)
            for i in range(n):
                out[..., i], _ = maximize_scalar(lambda ai: row_value(i, a, ai),
                                                 A.low[0], A.high[0], a.shape[:-1])
            return out

    batch = z_mat.shape[:-1] if z_mat.shape[-3:-1] != (n, n) else z_mat.shape[:-2]
    a = np.full(batch, A.a_o) if actions0 is None else np.array(actions0, dtype=float)
    for _ in range(max_iter):
        new = project_to_A(A, (1.0 - damping) * a + damping * br(a))
        new = np.asarray(new, dtype=float)
        if np.max(np.abs(new - a), initial=0.0) <= tol_fp:
            return new
        a = new
    raise NonConvergence(f"best response iteration did not converge in {max_iter} steps")
