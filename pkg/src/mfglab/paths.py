"""Driftless state ensembles under the base measure and Girsanov reweighting."""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .core import EmpiricalMeasure, ModelSpec, PathPrefix, TimeGrid
from .errors import ContractViolation, NumericalAbort

BLOCK = 512
LOG_CLIP = 30.0
MAGIC = b"MFGB"
FORMAT_VERSION = 1


def _block_normals(seed: int, block: int, rows: int, cols: int) -> np.ndarray:
    # one counter-based stream per block of paths; a block always draws BLOCK rows
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(block,))
    gen = np.random.Generator(np.random.Philox(ss))
    return gen.standard_normal((BLOCK, cols))[:rows]


def _map_blocks(fn: Callable[[int, int, int], None], n: int, threads: int = 1):
    ranges = [(b, b * BLOCK, min(n, (b + 1) * BLOCK)) for b in range((n + BLOCK - 1) // BLOCK)]
    if threads <= 1 or len(ranges) <= 1:
        for r in ranges:
            fn(*r)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for fut in [pool.submit(fn, *r) for r in ranges]:
            fut.result()


def brownian_increments(seed: int, n_paths: int, grid: TimeGrid, d: int = 1,
                        threads: int = 1, stream: int = 0) -> np.ndarray:
    """Increments of shape ``(n_paths, K, d)`` with variance ``dt``.

    Path ``p`` always receives the same numbers for a given ``(seed, stream)``
    whatever ``n_paths`` or ``threads`` is, so ensembles are nested and
    thread-count invariant.  ``stream`` separates independent uses of a seed.
    """
    if n_paths < 1:
        raise ContractViolation("need at least one path")
    K = grid.steps
    out = np.empty((n_paths, K * d))
    sd = np.sqrt(grid.dt)
    offset = stream * (1 << 40)

    def work(b, start, stop):
        out[start:stop] = _block_normals(seed, offset + b, stop - start, K * d) * sd

    _map_blocks(work, n_paths, threads)
    return out.reshape(n_paths, K, d)


@dataclass(frozen=True)
class PathEnsemble:
    """``M`` grid paths with their Brownian increments."""

    states: np.ndarray
    increments: np.ndarray
    grid: TimeGrid
    seed: int

    def __post_init__(self):
        M, K1, _ = self.states.shape
        if self.increments.shape[:2] != (M, K1 - 1) or K1 - 1 != self.grid.steps:
            raise ContractViolation("states and increments do not match the grid")

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    @property
    def noise_dim(self) -> int:
        return self.increments.shape[2]

    def prefix(self, k: int) -> PathPrefix:
        return PathPrefix(self.states[:, : k + 1, :], self.grid.dt)

    def save(self, path) -> None:
        write_ensemble(path, self)

    @classmethod
    def load(cls, path) -> "PathEnsemble":
        return read_ensemble(path)


def _euler(model: ModelSpec, grid: TimeGrid, states: np.ndarray, dW: np.ndarray, offset: int):
    for k in range(grid.steps):
        sig = np.asarray(model.volatility(grid.t(k), PathPrefix(states[:, : k + 1, :], grid.dt)),
                         dtype=float)
        bad = ~np.isfinite(sig).reshape(sig.shape[0], -1).all(axis=1)
        if bad.any():
            p = offset + int(np.argmax(bad))
            raise NumericalAbort(f"non-finite volatility on path {p} at step {k}")
        states[:, k + 1, :] = states[:, k, :] + np.einsum("pmd,pd->pm", sig, dW[:, k, :])


def simulate_state_paths(model: ModelSpec, grid: TimeGrid, M: int, seed: int, X_0=0.0,
                         threads: int = 1, increments: Optional[np.ndarray] = None) -> PathEnsemble:
    """Euler scheme for ``dX = sigma(t, X) dW`` under the base measure."""
    m, d = model.state_dim, model.noise_dim
    dW = brownian_increments(seed, M, grid, d, threads) if increments is None else increments
    if dW.shape != (M, grid.steps, d):
        raise ContractViolation(f"increments must have shape {(M, grid.steps, d)}")
    x0 = np.broadcast_to(np.asarray(X_0, dtype=float), (m,))
    states = np.empty((M, grid.steps + 1, m))
    states[:, 0, :] = x0

    def work(b, start, stop):
        _euler(model, grid, states[start:stop], dW[start:stop], start)

    _map_blocks(work, M, threads)
    return PathEnsemble(states, dW, grid, int(seed))


@dataclass(frozen=True)
class WeightEnsemble:
    """Cumulative Girsanov log-weights, shape ``(M, K+1)``."""

    log_weights: np.ndarray
    clip_count: int = 0

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def at(self, k: int) -> np.ndarray:
        return np.exp(self.log_weights[:, k])

    @property
    def terminal(self) -> np.ndarray:
        return self.at(-1)

    @classmethod
    def unit(cls, M: int, K: int) -> "WeightEnsemble":
        return cls(np.zeros((M, K + 1)), 0)


def girsanov_weights(model: ModelSpec, paths: PathEnsemble, controls,
                     xi: Union[Callable[[int], EmpiricalMeasure], "object"]) -> WeightEnsemble:
    """Discrete stochastic exponential of ``sum_k b_k . dW_k``.

    ``controls`` has shape ``(M, K)`` (or ``(M, K+1)``); ``xi`` is indexable
    by the time step and returns the measure slice used in the drift.
    """
    controls = np.asarray(controls, dtype=float)
    M, K = paths.n_paths, paths.grid.steps
    if controls.shape[0] != M or controls.shape[1] < K:
        raise ContractViolation("controls must cover every path and grid step")
    dt = paths.grid.dt
    inc = np.empty((M, K))
    for k in range(K):
        b = np.asarray(model.drift(paths.grid.t(k), paths.prefix(k), xi[k], controls[:, k]),
                       dtype=float)
        b = np.broadcast_to(b, (M, model.noise_dim))
        if not np.all(np.isfinite(b)):
            raise NumericalAbort(f"non-finite drift at step {k}")
        inc[:, k] = np.einsum("pd,pd->p", b, paths.increments[:, k, :]) - 0.5 * dt * np.einsum(
            "pd,pd->p", b, b)
    clipped = int(np.count_nonzero(np.abs(inc) > LOG_CLIP))
    np.clip(inc, -LOG_CLIP, LOG_CLIP, out=inc)
    logw = np.zeros((M, K + 1))
    np.cumsum(inc, axis=1, out=logw[:, 1:])
    return WeightEnsemble(logw, clipped)


def reweighted_expectation(values, weights: Optional[WeightEnsemble], k: int = -1,
                           self_normalized: bool = False):
    """Estimate of ``E^{P^alpha}[values]`` as a weighted mean under the base measure.

    Returns ``(estimate, standard_error)``.  Without self-normalization the
    estimate is ``sum_p w_p v_p / M``.
    """
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ContractViolation("values must be finite")
    M = v.shape[0]
    w = np.ones(M) if weights is None else weights.at(k)
    if not np.any(w > 0):
        raise ContractViolation("all weights are zero")
    wv = w * v
    if self_normalized:
        est = wv.sum() / w.sum()
        resid = w * (v - est) / w.mean()
        return float(est), float(resid.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    est = wv.mean()
    se = wv.std(ddof=1) / np.sqrt(M) if M > 1 else 0.0
    return float(est), float(se)


_HEADER = struct.Struct("<4sIQQQQQ")


def write_ensemble(path, ens: PathEnsemble) -> None:
    """Binary dump: header then states and increments as little-endian float64.

    Header: magic ``MFGB``, version (u32), M, K, m, d, seed (u64 each).
    Arrays are row-major ``[path][time][component]``; states first.
    """
    M, K1, m = ens.states.shape
    d = ens.increments.shape[2]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, M, K1 - 1, m, d,
                              int(ens.seed) & (2**64 - 1)))
        fh.write(np.ascontiguousarray(ens.states, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ens.increments, dtype="<f8").tobytes())


def read_ensemble(path, horizon: Optional[float] = None) -> PathEnsemble:
    """Inverse of :func:`write_ensemble`.

    The header does not store the horizon; pass it when it is not 1.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, M, K, m, d, seed = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise ValueError("not an MFGB ensemble file")
    off = _HEADER.size
    n_s = M * (K + 1) * m
    states = np.frombuffer(raw, dtype="<f8", count=n_s, offset=off).reshape(M, K + 1, m)
    incs = np.frombuffer(raw, dtype="<f8", count=M * K * d, offset=off + 8 * n_s).reshape(M, K, d)
    grid = TimeGrid(1.0 if horizon is None else horizon, K)
    return PathEnsemble(states.astype(float), incs.astype(float), grid, seed)
