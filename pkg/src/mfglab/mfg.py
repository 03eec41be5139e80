"""Fixed-point solvers for McKean-Vlasov BSDEs and mean-field equilibria.

The mean-field solver works in the weak formulation: state paths are
simulated once under the base measure and every candidate control acts only
through Girsanov weights.  One Picard step maps a measure flow ``xi`` to

1. the BSDE under the base measure with generator ``H(t, x, xi_t, z)``,
2. the pathwise maximizer ``alpha_t = argmax_a h(t, x, xi_t, Z_t, a)``,
3. the Girsanov weights of ``alpha`` (drift evaluated against ``xi``),
4. the weighted cloud of (state feature, ``alpha_t``) at every grid time.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .bsde import BsdeSolution, RegressionBasis, solve_bsde_regression
from .core import (EmpiricalMeasure, ModelSpec, PathPrefix, TimeGrid, argmax_hamiltonian,
                   hamiltonian)
from .errors import ContractViolation, NonConvergence
from .metrics import w2sq_1d
from .paths import (PathEnsemble, WeightEnsemble, brownian_increments, girsanov_weights,
                    simulate_state_paths)

EPSILON = 0.25
DAMPING = 0.5
DAMPING_TRIGGER = 0.9


def default_beta(lipschitz: float, epsilon: float = EPSILON) -> float:
    return 2.0 * (1.0 + lipschitz ** 2) / epsilon


def time_weights(grid: TimeGrid, beta: float) -> np.ndarray:
    """``exp(beta t_k)`` normalized to average one over ``[0, T]``."""
    t = grid.times
    if beta == 0:
        return np.ones_like(t)
    # the shift keeps exp() finite for large beta T
    w = np.exp(beta * (t - grid.horizon))
    avg = -math.expm1(-beta * grid.horizon) / (beta * grid.horizon)
    return w / avg


@dataclass
class MeasureFlow:
    """Per-time weighted clouds of (state feature, action).

    ``features`` has shape ``(K+1, n, q)``, ``actions`` and ``weights`` have
    shape ``(K+1, n)``.
    """

    features: np.ndarray
    actions: np.ndarray
    weights: np.ndarray
    _order: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        K1, n, _ = self.features.shape
        if self.actions.shape != (K1, n) or self.weights.shape != (K1, n):
            raise ContractViolation("features, actions and weights must share (K+1, n)")
        if np.any(self.weights < 0) or np.any(self.weights.sum(axis=1) <= 0):
            raise ContractViolation("flow weights must be nonnegative with positive mass")

    def __getitem__(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.features[k], self.actions[k], self.weights[k])

    def __len__(self):
        return self.features.shape[0]

    @property
    def size(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_ensemble(cls, features, actions, weights: Optional[WeightEnsemble] = None,
                      order: Optional[np.ndarray] = None):
        """``features`` ``(K+1, n, q)``, ``actions`` ``(n, K)`` or ``(n, K+1)``."""
        K1, n, _ = features.shape
        acts = np.asarray(actions, dtype=float)
        if acts.shape[1] == K1 - 1:
            acts = np.concatenate([acts, acts[:, -1:]], axis=1)
        w = np.ones((K1, n)) if weights is None else weights.weights.T.copy()
        return cls(features, acts.T.copy(), w, order)

    @classmethod
    def point_mass(cls, feature, action, steps: int):
        feat = np.asarray(feature, dtype=float).reshape(1, 1, -1)
        return cls(np.repeat(feat, steps + 1, axis=0), np.full((steps + 1, 1), float(action)),
                   np.ones((steps + 1, 1)))

    def weight_mean(self, k: int):
        w = self.weights[k]
        return float(w.mean()), float(w.std(ddof=1) / math.sqrt(w.size)) if w.size > 1 else 0.0

    def mix(self, other: "MeasureFlow", theta: float, size: Optional[int] = None) -> "MeasureFlow":
        """``(1 - theta) self + theta other``, resampled to ``size`` atoms.

        Systematic resampling with a fixed offset keeps the result
        deterministic; the resampled atoms carry unit weight.
        """
        n = self.size if size is None else size
        K1 = len(self)
        feats = np.empty((K1, n, self.features.shape[2]))
        acts = np.empty((K1, n))
        u = (np.arange(n) + 0.5) / n
        for k in range(K1):
            wa = (1.0 - theta) * self.weights[k] / self.weights[k].sum()
            wb = theta * other.weights[k] / other.weights[k].sum()
            c = np.cumsum(np.concatenate([wa, wb]))
            idx = np.minimum(np.searchsorted(c / c[-1], u, side="left"), c.size - 1)
            fk = np.concatenate([self.features[k], other.features[k]])
            ak = np.concatenate([self.actions[k], other.actions[k]])
            feats[k], acts[k] = fk[idx], ak[idx]
        return MeasureFlow(feats, acts, np.ones((K1, n)))

    def distance(self, other: "MeasureFlow", grid: TimeGrid, beta: float) -> float:
        """Discrete ``W_{2,beta,[0,T]}``: per-time W2 (sum over feature and
        action marginals) integrated with normalized ``exp(beta t)`` weights."""
        return math.sqrt(max(np.sum(_trapezoid(self.w2sq_profile(other), grid, beta)), 0.0))

    def feature_order(self) -> np.ndarray:
        """Sorting permutation of every feature column, cached and shared
        with flows built on the same feature array."""
        if self._order is None:
            self._order = np.argsort(self.features, axis=1, kind="stable")
        return self._order

    def w2sq_profile(self, other: "MeasureFlow") -> np.ndarray:
        oa, ob = self.feature_order(), other.feature_order()
        out = np.empty(len(self))
        for k in range(len(self)):
            tot = w2sq_1d(self.actions[k], other.actions[k], self.weights[k], other.weights[k])
            for j in range(self.features.shape[2]):
                tot += w2sq_1d(self.features[k, :, j], other.features[k, :, j],
                               self.weights[k], other.weights[k], oa[k, :, j], ob[k, :, j])
            out[k] = tot
        return out


def _trapezoid(values, grid: TimeGrid, beta: float):
    w = time_weights(grid, beta) * values
    return 0.5 * grid.dt * (w[:-1] + w[1:])


def h2_distance(A, B, grid: TimeGrid, beta: float) -> float:
    """``(sum_k dt e^{beta t_k} mean|A_k - B_k|^2)^{1/2}`` for ``(M, K, ...)`` fields."""
    diff = np.asarray(A, dtype=float) - np.asarray(B, dtype=float)
    per_k = np.mean(diff.reshape(diff.shape[0], diff.shape[1], -1) ** 2, axis=0).sum(axis=1)
    w = time_weights(grid, beta)[: per_k.size]
    return math.sqrt(float(np.sum(w * per_k) * grid.dt))


@dataclass
class PicardReport:
    """Distance history of a Picard iteration."""

    distance_z: List[float] = field(default_factory=list)
    distance_xi: List[float] = field(default_factory=list)
    factor: List[float] = field(default_factory=list)
    damped: List[bool] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    beta: float = 0.0
    warnings: List[str] = field(default_factory=list)

    def record(self, dz: float, dxi: float) -> float:
        total = dz + dxi
        prev = self.distance_z[-1] + self.distance_xi[-1] if self.distance_z else None
        fac = total / prev if prev else float("nan")
        self.distance_z.append(float(dz))
        self.distance_xi.append(float(dxi))
        self.factor.append(float(fac))
        self.iterations += 1
        return fac

    @property
    def last_distance(self) -> float:
        return self.distance_z[-1] + self.distance_xi[-1] if self.distance_z else float("inf")

    def rows(self):
        for i, (dz, dx, f) in enumerate(zip(self.distance_z, self.distance_xi, self.factor), 1):
            yield i, dz, dx, f


# -- standard McKean-Vlasov BSDE ---------------------------------------------


@dataclass(frozen=True)
class MkvProblem:
    """McKean-Vlasov BSDE ``Y = G + int F(t, X, Y, Z, L(X, Y, Z)) dt - int Z dW``.

    ``driver(t, path, y, z, law)`` receives the law as an
    :class:`EmpiricalMeasure` whose feature columns are ``[x..., y, z...]``
    under the base measure.  ``terminal(path)`` returns the terminal value.
    """

    driver: Callable
    terminal: Callable
    lipschitz: float = 1.0


def case_study_mkv(kappa1: float = 1.0, f=np.tanh, g=None, a_min=-1.0, a_max=1.0) -> MkvProblem:
    """Mean-field driver of the interaction game with ``k = 0`` and
    ``kappa2 = 0`` when the law of the state is taken under the base measure
    (the equilibrium law when ``g = 0``)."""
    g = (lambda x: np.zeros_like(x)) if g is None else g

    def driver(t, path, y, z, law):
        a = np.clip(z[..., 0], a_min, a_max)
        return a * z[..., 0] - 0.5 * a * a + kappa1 * law.state_expect(f)

    return MkvProblem(driver, lambda path: g(path.current[..., 0]), max(1.0, abs(kappa1)))


def solve_mkv_bsde(problem: MkvProblem, paths: PathEnsemble,
                   basis: RegressionBasis = RegressionBasis(), beta: Optional[float] = None,
                   tol_picard: float = 1e-3, max_iter: int = 30,
                   z_clip: Optional[float] = None):
    """Picard iteration on the frozen law ``L(X, Y, Z)`` under the base measure.

    Returns ``(BsdeSolution, PicardReport)``; raises :class:`NonConvergence`
    with the report attached when ``max_iter`` is exhausted.
    """
    M, K, d = paths.increments.shape
    grid = paths.grid
    beta = default_beta(problem.lipschitz) if beta is None else beta
    report = PicardReport(beta=beta)
    terminal = problem.terminal(paths.prefix(K))
    Y_prev = np.zeros((M, K + 1))
    Z_prev = np.zeros((M, K, d))
    for _ in range(max_iter):
        laws = [EmpiricalMeasure(np.column_stack([paths.states[:, k, :], Y_prev[:, k],
                                                  Z_prev[:, min(k, K - 1), :]]))
                for k in range(K)]

        def gen(k, y, z, laws=laws):
            return problem.driver(grid.t(k), paths.prefix(k), y, z, laws[k])

        sol = solve_bsde_regression(paths, terminal, gen, basis, z_clip=z_clip)
        dist = h2_distance(np.concatenate([sol.Y[:, :K, None], sol.Z], axis=2),
                           np.concatenate([Y_prev[:, :K, None], Z_prev], axis=2), grid, beta)
        report.record(dist, 0.0)
        Y_prev, Z_prev = sol.Y, sol.Z
        if dist <= tol_picard:
            report.converged = True
            return sol, report
    raise NonConvergence(f"McKean-Vlasov Picard iteration did not reach {tol_picard} "
                         f"in {max_iter} iterations", report)


# -- generalized McKean-Vlasov BSDE / mean-field equilibrium -----------------


def mfg_design(model: ModelSpec, basis: RegressionBasis, prefix: PathPrefix) -> np.ndarray:
    """Regressors of the mean-field BSDE: own state, plus lagged state for
    delayed models."""
    own = prefix.current.reshape(-1, model.state_dim)
    if model.lag > 0:
        lagged = prefix.lagged(model.lag).reshape(-1, model.state_dim)
        b = RegressionBasis(basis.degree, False, True, basis.ridge)
        return b.design(own, lagged=lagged)
    return RegressionBasis(basis.degree, False, False, basis.ridge).design(own)


@dataclass
class MfgSolution:
    """Mean-field equilibrium on a fixed base-measure ensemble.

    ``flow`` is the measure flow used in the coefficients; ``controls`` and
    ``weights`` regenerate it up to the Picard tolerance.
    """

    model: ModelSpec
    grid: TimeGrid
    paths: PathEnsemble
    basis: RegressionBasis
    bsde: BsdeSolution
    flow: MeasureFlow
    weights: WeightEnsemble
    controls: np.ndarray
    report: PicardReport
    z_clip: Optional[float] = None
    X_0: object = 0.0
    _se: Optional[float] = field(default=None, repr=False)

    @property
    def Y0(self) -> float:
        return self.bsde.Y0

    @property
    def Y0_se(self) -> float:
        """Jackknife standard error covering both the path average and the
        Monte-Carlo error of the measure cloud."""
        if self._se is None:
            self._se = jackknife_value_se(self)
        return self._se

    def __iter__(self):
        return iter((self.bsde, self.flow, self.weights, self.report))

    def regenerated_flow(self) -> MeasureFlow:
        feats = np.stack([self.model.features(self.paths.prefix(k)) for k in range(self.grid.steps + 1)])
        return MeasureFlow.from_ensemble(feats, self.controls, self.weights)

    def z_field(self, k: int, prefix: PathPrefix) -> np.ndarray:
        z = self.bsde.z_at(k, mfg_design(self.model, self.basis, prefix))
        return z if self.z_clip is None else np.clip(z, -self.z_clip, self.z_clip)

    def control(self, k: int, prefix: PathPrefix) -> np.ndarray:
        """Equilibrium feedback ``argmax_a h(t_k, x, xi_k, Z_k(x), a)``."""
        return argmax_hamiltonian(self.model, self.grid.t(k), prefix, self.flow[k],
                                  self.z_field(k, prefix))

    def simulate_copies(self, n: int, seed: int, increments=None, X_0=None, threads: int = 1):
        """Strong-form i.i.d. copies of the equilibrium state under the
        equilibrium measure, driven by fresh (or supplied) increments.

        Returns ``(states (n, K+1, m), actions (n, K+1))``.
        """
        model, grid = self.model, self.grid
        m, d = model.state_dim, model.noise_dim
        dW = brownian_increments(seed, n, grid, d, threads, stream=1) if increments is None \
            else np.asarray(increments, dtype=float)
        x0 = self.X_0 if X_0 is None else X_0
        states = np.empty((n, grid.steps + 1, m))
        states[:, 0, :] = np.broadcast_to(np.asarray(x0, dtype=float), (m,))
        actions = np.empty((n, grid.steps + 1))
        for k in range(grid.steps):
            prefix = PathPrefix(states[:, : k + 1, :], grid.dt)
            a = self.control(k, prefix)
            b = model.drift(grid.t(k), prefix, self.flow[k], a)
            sig = model.volatility(grid.t(k), prefix)
            states[:, k + 1, :] = states[:, k, :] + np.einsum(
                "pmd,pd->pm", sig, b * grid.dt + dW[:, k, :])
            actions[:, k] = a
        actions[:, -1] = actions[:, -2]
        return states, actions


def jackknife_value_se(sol: MfgSolution, n_blocks: int = 10) -> float:
    """Delete-a-group jackknife of the value under the base measure.

    The value is the path average of ``g(X_T, xi_T) + sum_k H_k dt``.  Each
    replicate drops one block of paths and the same block of measure atoms,
    re-evaluating the rewards against the reduced clouds with the controls
    held fixed.
    """
    model, grid, paths = sol.model, sol.grid, sol.paths
    M, K = paths.n_paths, grid.steps
    n_atoms = sol.flow.size
    B = min(n_blocks, M, n_atoms)
    if B < 2:
        return sol.bsde.Y0_se
    path_blocks = np.array_split(np.arange(M), B)
    atom_blocks = np.array_split(np.arange(n_atoms), B)
    reps = np.empty(B)
    for b in range(B):
        keep = np.ones(M, dtype=bool)
        keep[path_blocks[b]] = False
        akeep = np.ones(n_atoms, dtype=bool)
        akeep[atom_blocks[b]] = False
        states = paths.states[keep]

        def xi(k):
            return EmpiricalMeasure(sol.flow.features[k][akeep], sol.flow.actions[k][akeep],
                                    sol.flow.weights[k][akeep])

        pre_K = PathPrefix(states, grid.dt)
        total = np.broadcast_to(np.asarray(model.terminal_reward(pre_K, xi(K)), dtype=float),
                                (states.shape[0],)).copy()
        Z = sol.bsde.Z[keep]
        if sol.z_clip is not None:
            Z = np.clip(Z, -sol.z_clip, sol.z_clip)
        for k in range(K):
            prefix = PathPrefix(states[:, : k + 1, :], grid.dt)
            total += hamiltonian(model, grid.t(k), prefix, xi(k), Z[:, k, :],
                                 sol.controls[keep, k]) * grid.dt
        reps[b] = total.mean()
    return float(math.sqrt((B - 1) / B * np.sum((reps - reps.mean()) ** 2)))


def _initial_flow(model, paths: PathEnsemble, feats, init: str, X_0):
    K = paths.grid.steps
    a_o = model.action_set.a_o
    if init == "base":
        return MeasureFlow(feats, np.full(feats.shape[:2], a_o), np.ones(feats.shape[:2]))
    if init == "point":
        x0 = np.broadcast_to(np.asarray(X_0, dtype=float), (model.state_dim,))
        feat0 = model.features(PathPrefix(np.broadcast_to(x0, (1, 1, model.state_dim)), paths.grid.dt))
        return MeasureFlow.point_mass(feat0[0], a_o, K)
    raise ContractViolation(f"unknown initialization {init!r}; use 'base' or 'point'")


def solve_generalized_mkv(model: ModelSpec, grid: TimeGrid, M: int, seed: int,
                          basis: RegressionBasis = RegressionBasis(), tol_picard: float = 1e-3,
                          max_iter: int = 15, beta: Optional[float] = None, X_0=0.0,
                          init: str = "base", z_clip: Optional[float] = 10.0,
                          threads: int = 1, paths: Optional[PathEnsemble] = None,
                          damping: float = DAMPING) -> MfgSolution:
    """Mean-field equilibrium by Picard iteration on ``(Z, xi)``.

    Stops when ``distance_z + distance_xi <= tol_picard``.  When the observed
    contraction factor exceeds 0.9 the new flow is mixed with the old one.
    Raises :class:`NonConvergence` (report attached) after ``max_iter``.
    """
    if paths is None:
        paths = simulate_state_paths(model, grid, M, seed, X_0, threads)
    beta = default_beta(model.lipschitz) if beta is None else beta
    K = grid.steps
    prefixes = [paths.prefix(k) for k in range(K + 1)]
    feats = np.stack([model.features(p) for p in prefixes])
    flow = _initial_flow(model, paths, feats, init, X_0)
    order = np.argsort(feats, axis=1, kind="stable")
    if init == "base":
        flow._order = order
    Z_prev = np.zeros((paths.n_paths, K, model.noise_dim))
    report = PicardReport(beta=beta)

    def design(k):
        return mfg_design(model, basis, prefixes[k])

    for _ in range(max_iter):
        controls = np.empty((paths.n_paths, K))
        terminal = np.asarray(model.terminal_reward(prefixes[K], flow[K]), dtype=float)
        terminal = np.broadcast_to(terminal, (paths.n_paths,)).copy()

        def gen(k, y, z, flow=flow, controls=controls):
            t = grid.t(k)
            a = argmax_hamiltonian(model, t, prefixes[k], flow[k], z)
            controls[:, k] = a
            return hamiltonian(model, t, prefixes[k], flow[k], z, a)

        sol = solve_bsde_regression(paths, terminal, gen, basis, design=design, z_clip=z_clip,
                                    keep_models=True)
        weights = girsanov_weights(model, paths, controls, flow)
        if weights.clip_count:
            report.warnings.append(f"iteration {report.iterations + 1}: "
                                   f"{weights.clip_count} clipped log-weight increments")
        new_flow = MeasureFlow.from_ensemble(feats, controls, weights, order)
        dz = h2_distance(sol.Z, Z_prev, grid, beta)
        dxi = new_flow.distance(flow, grid, beta)
        fac = report.record(dz, dxi)
        converged = dz + dxi <= tol_picard
        damp = not converged and report.iterations > 1 and fac > DAMPING_TRIGGER
        report.damped.append(bool(damp))
        if converged:
            report.converged = True
            return MfgSolution(model, grid, paths, basis, sol, flow, weights, controls, report,
                               z_clip, X_0)
        if damp:
            report.warnings.append(f"iteration {report.iterations}: contraction factor "
                                   f"{fac:.3g} > {DAMPING_TRIGGER}, damping applied")
            new_flow = flow.mix(new_flow, 1.0 - damping, size=paths.n_paths)
        flow, Z_prev = new_flow, sol.Z
    raise NonConvergence(f"mean-field Picard iteration did not reach {tol_picard} "
                         f"in {max_iter} iterations", report)


# -- equilibrium certificate -------------------------------------------------


@dataclass
class Certificate:
    """Largest estimated gain of a unilateral deviation against frozen ``xi``."""

    gain: float
    se: float
    gains: np.ndarray
    ses: np.ndarray
    labels: List[str]

    @property
    def passed(self) -> bool:
        return self.gain <= 3.0 * self.se + 1e-12


def _reward_under(model, sol: MfgSolution, controls, flow, weights=None):
    """Pathwise reweighted total reward of ``controls`` against frozen ``flow``."""
    paths, grid = sol.paths, sol.grid
    K = grid.steps
    if weights is None:
        weights = girsanov_weights(model, paths, controls, flow)
    total = np.zeros(paths.n_paths)
    for k in range(K):
        f = model.running_reward(grid.t(k), paths.prefix(k), flow[k], controls[:, k])
        total += weights.at(k) * np.broadcast_to(f, total.shape) * grid.dt
    g = model.terminal_reward(paths.prefix(K), flow[K])
    total += weights.at(K) * np.broadcast_to(g, total.shape)
    return total


def deviation_strategies(model: ModelSpec, sol: MfgSolution, n_deviations: int, seed: int):
    """Constant actions, bang-bang switches and small shifts of the equilibrium."""
    A = model.action_set
    lo, hi = A.low[0], A.high[0]
    M, K = sol.controls.shape
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(7,)))
    n_shift = min(2, n_deviations)
    n_const = (n_deviations - n_shift + 1) // 2
    n_bang = n_deviations - n_shift - n_const
    out = []
    for a in np.linspace(lo, hi, n_const) if n_const > 1 else [A.a_o] * n_const:
        out.append((f"constant {a:.4g}", np.full((M, K), float(a))))
    for j in range(n_bang):
        s = int(rng.integers(1, K)) if K > 1 else 0
        first, second = (lo, hi) if j % 2 == 0 else (hi, lo)
        c = np.where(np.arange(K) < s, first, second)
        out.append((f"bang-bang {first:.3g}->{second:.3g} at step {s}", np.broadcast_to(c, (M, K)).copy()))
    span = hi - lo
    for j in range(n_shift):
        delta = (0.05 if j == 0 else -0.05) * span
        out.append((f"shift {delta:+.3g}", np.clip(sol.controls + delta, lo, hi)))
    return out


def equilibrium_certificate(model: ModelSpec, solution: MfgSolution,
                            flow: Optional[MeasureFlow] = None,
                            weights: Optional[WeightEnsemble] = None,
                            n_deviations: int = 20, seed: int = 0) -> Certificate:
    """Largest gain ``J^xi(alpha) - J^xi(alpha_hat)`` over deviation strategies,
    each evaluated by reweighting the base ensemble with ``xi`` frozen."""
    if not model.action_set.is_interval:
        raise ContractViolation("deviation strategies need an interval action set")
    flow = solution.flow if flow is None else flow
    base = _reward_under(model, solution, solution.controls, flow, weights)
    gains, ses, labels = [], [], []
    M = base.size
    for label, ctrl in deviation_strategies(model, solution, n_deviations, seed):
        diff = _reward_under(model, solution, ctrl, flow) - base
        gains.append(float(diff.mean()))
        ses.append(float(diff.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0)
        labels.append(label)
    gains, ses = np.array(gains), np.array(ses)
    j = int(np.argmax(gains))
    return Certificate(float(gains[j]), float(ses[j]), gains, ses, labels)
