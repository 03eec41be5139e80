"""Command-line harness: ``mfglab <subcommand> --config FILE``.

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence,
4 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import warnings
from typing import Dict, List

import numpy as np
import scipy

from . import __version__
from .bsde import RegressionBasis
from .config import ConfigError, ExperimentConfig, derive_seed, load_config
from .errors import BudgetExceeded, ContractViolation, NonConvergence, NumericalAbort
from .metrics import (RateTable, fit_loglog_slope, gamma_N_estimate, rate_bound, write_fits)
from .mfg import MfgSolution, solve_generalized_mkv
from .nplayer import coupled_comparison, solve_nplayer_particle, zsum_diagnostic
from .paths import simulate_state_paths

EXIT_OK, EXIT_CONFIG, EXIT_NONCONV, EXIT_NUMERIC = 0, 2, 3, 4
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_manifest(cfg: ExperimentConfig, command: str, out: str, files: List[str],
                   partial: bool = False, notes: List[str] = ()) -> None:
    manifest = {
        "command": command,
        "config": cfg.as_dict(),
        "config_hash": cfg.content_hash(),
        "seed": cfg.seed,
        "versions": {"mfglab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "outputs": {name: _sha256(os.path.join(out, name)) for name in sorted(files)},
        "partial": partial,
        "notes": list(notes),
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _law_notes(model) -> List[str]:
    if model.lag > 0:
        return ["feature-W2: path laws compared on (current state, lagged state) features"]
    return []


def _basis(cfg: ExperimentConfig) -> RegressionBasis:
    r = cfg.numerics["ridge"]
    return RegressionBasis(int(cfg.numerics["basis_degree"]), True, False,
                           None if r is None else float(r))


def _solve_mfg(cfg: ExperimentConfig, model, threads: int) -> MfgSolution:
    n = cfg.numerics
    return solve_generalized_mkv(model, cfg.grid, cfg.M, cfg.seed, _basis(cfg),
                                 tol_picard=float(n["tol_picard"]), max_iter=int(n["max_iter"]),
                                 beta=cfg.beta, X_0=float(cfg.model["x0"]),
                                 z_clip=float(n["z_clip"]), threads=threads)


def _solve_nplayer(cfg: ExperimentConfig, model, N: int, threads: int):
    n = cfg.numerics
    return solve_nplayer_particle(model, N, cfg.grid, cfg.scenarios(N), derive_seed(cfg.seed, 1, N),
                                  _basis(cfg), tol_fp=float(n["tol_fp"]),
                                  max_iter=int(n["nplayer_max_iter"]), X_0=float(cfg.model["x0"]),
                                  z_clip=float(n["z_clip"]), budget_cap=int(n["budget_cap"]),
                                  threads=threads)


def _weighted_quantiles(x, w, qs):
    order = np.argsort(x, kind="stable")
    c = np.cumsum(w[order])
    c /= c[-1]
    idx = np.minimum(np.searchsorted(c, qs, side="left"), x.size - 1)
    return x[order][idx]


def cmd_simulate(cfg: ExperimentConfig, out: str, threads: int) -> int:
    model = cfg.build_model()
    ens = simulate_state_paths(model, cfg.grid, cfg.M, cfg.seed, float(cfg.model["x0"]), threads)
    ens.save(os.path.join(out, "paths.bin"))
    rows = [(k, cfg.grid.t(k), float(ens.states[:, k, 0].mean()), float(ens.states[:, k, 0].var()))
            for k in range(cfg.K + 1)]
    _write_csv(os.path.join(out, "paths_summary.csv"), ["step", "t", "mean", "var"], rows)
    write_manifest(cfg, "simulate", out, ["paths.bin", "paths_summary.csv"])
    print(f"simulated {cfg.M} paths with {cfg.K} steps -> {out}")
    return EXIT_OK


def _write_mfg_outputs(cfg, sol: MfgSolution, out: str) -> List[str]:
    _write_csv(os.path.join(out, "mfg_summary.csv"),
               ["Y0", "se", "iterations", "converged", "clip_count"],
               [(sol.Y0, sol.Y0_se, sol.report.iterations, int(sol.report.converged),
                 sol.weights.clip_count)])
    _write_csv(os.path.join(out, "picard.csv"), ["iter", "distance_z", "distance_xi", "factor"],
               list(sol.report.rows()))
    rows = []
    for k in range(cfg.K + 1):
        meas = sol.flow[k]
        qs = _weighted_quantiles(meas.actions, meas.weights, QUANTILES)
        rows.append((k, cfg.grid.t(k), *[float(v) for v in qs],
                     float(np.asarray(meas.action_expect()).ravel()[0])))
    _write_csv(os.path.join(out, "law_snapshots.csv"),
               ["step", "t", "q05", "q25", "q50", "q75", "q95", "mean"], rows)
    _write_csv(os.path.join(out, "bsde_diagnostics.csv"), ["step", "R2", "residual"],
               [(k, float(sol.bsde.r2[k]), float(sol.bsde.residuals[k])) for k in range(cfg.K)])
    return ["mfg_summary.csv", "picard.csv", "law_snapshots.csv", "bsde_diagnostics.csv"]


def cmd_solve_mfg(cfg: ExperimentConfig, out: str, threads: int) -> int:
    model = cfg.build_model()
    sol = _solve_mfg(cfg, model, threads)
    files = _write_mfg_outputs(cfg, sol, out)
    write_manifest(cfg, "solve-mfg", out, files, notes=_law_notes(model) + sol.report.warnings)
    print(f"Y0 = {sol.Y0!r} +/- {sol.Y0_se!r} ({sol.report.iterations} Picard iterations)")
    return EXIT_OK


def cmd_solve_nplayer(cfg: ExperimentConfig, out: str, threads: int, N: int) -> int:
    if N < 1:
        raise ConfigError("--N must be >= 1")
    model = cfg.build_model()
    sol = _solve_nplayer(cfg, model, N, threads)
    zs = zsum_diagnostic(sol)
    _write_csv(os.path.join(out, "nplayer_summary.csv"),
               ["N", "scenarios", "Y0", "se", "spread", "iterations", "z_sum"],
               [(N, sol.M, sol.Y0, sol.Y0_se, sol.spread, sol.iterations, zs)])
    rows = []
    for k in range(cfg.K + 1):
        cloud = sol.control_cloud(k)
        rows.append((k, cfg.grid.t(k), *[float(v) for v in np.quantile(cloud, QUANTILES)],
                     float(cloud.mean())))
    _write_csv(os.path.join(out, f"control_cloud_N{N}.csv"),
               ["step", "t", "q05", "q25", "q50", "q75", "q95", "mean"], rows)
    write_manifest(cfg, f"solve-nplayer --N {N}", out,
                   ["nplayer_summary.csv", f"control_cloud_N{N}.csv"])
    print(f"N = {N}: Y0 = {sol.Y0!r} +/- {sol.Y0_se!r}, z_sum = {zs!r}")
    return EXIT_OK


def run_converge(cfg: ExperimentConfig, out: str = None, threads: int = 1) -> Dict[str, RateTable]:
    """Mean-field reference once, then the N sweep; writes one CSV per quantity.

    Returns the tables.  Solver errors propagate after the completed rows,
    a ``fits.csv`` (when possible) and a manifest flagged ``partial`` are
    written.
    """
    out = cfg.directory if out is None else out
    os.makedirs(out, exist_ok=True)
    if len(cfg.sweep_N) == 0:
        raise ConfigError("missing required field [sweep] N")
    Ns = sorted(cfg.sweep_N)
    model = cfg.build_model()
    q = float(cfg.numerics["q"])
    n_dim = model.state_dim
    rate_bound(Ns[0], n_dim, q)  # reject excluded (n, q) pairs before any solve
    tables = {name: RateTable(name, model.name, cfg.seed, cfg.M, cfg.K)
              for name in ("value_gap_sq", "control_W2_int", "gamma_N", "chaos_W2", "z_sum")}
    files: List[str] = []
    notes: List[str] = _law_notes(model)
    partial = False
    error = None
    try:
        msol = _solve_mfg(cfg, model, threads)
        files += _write_mfg_outputs(cfg, msol, out)
        notes += msol.report.warnings
        for N in Ns:
            nsol = _solve_nplayer(cfg, model, N, threads)
            comp = coupled_comparison(nsol, msol)
            R_N = float(model.params.get("R_N_scale", 0.0)) / N
            theory = rate_bound(N, n_dim, q) + 1.0 / N + N * R_N ** 2
            tables["value_gap_sq"].add(N, comp.gap ** 2, 2.0 * abs(comp.gap) * comp.gap_se, theory)
            tables["control_W2_int"].add(N, comp.control_w2, comp.control_w2_se, theory)
            tables["chaos_W2"].add(N, comp.chaos_w2, comp.chaos_w2_se, theory)
            g, g_se = gamma_N_estimate(msol, N, cfg.n_rep, derive_seed(cfg.seed, 3, N), threads)
            tables["gamma_N"].add(N, g, g_se, rate_bound(N, n_dim, q))
            tables["z_sum"].add(N, zsum_diagnostic(nsol), 0.0, float("nan"))
    except (NonConvergence, NumericalAbort, BudgetExceeded) as exc:
        partial = True
        error = exc
        notes.append(f"sweep aborted: {type(exc).__name__}: {exc}")
    fits = []
    for name, table in tables.items():
        if not table.rows:
            continue
        fname = f"{name}.csv"
        table.to_csv(os.path.join(out, fname))
        files.append(fname)
        if len(table.rows) >= 3:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                try:
                    s, i, r2 = fit_loglog_slope(table)
                    n_pts = int(np.sum(table.estimates > 0))
                    fits.append((name, s, i, r2, n_pts))
                except ValueError as exc:
                    notes.append(f"slope fit skipped for {name}: {exc}")
                for w in caught:
                    notes.append(f"{name}: {w.message}")
    write_fits(os.path.join(out, "fits.csv"), fits)
    files.append("fits.csv")
    write_manifest(cfg, "converge", out, files, partial=partial, notes=notes)
    if error is not None:
        raise error
    return tables


def cmd_converge(cfg: ExperimentConfig, out: str, threads: int) -> int:
    tables = run_converge(cfg, out, threads)
    for name, table in tables.items():
        for r in table.rows:
            print(f"{name:15s} N={r.N:5d} estimate={r.estimate:.6g} se={r.se:.3g}")
    return EXIT_OK


def cmd_rates(cfg: ExperimentConfig, out: str, threads: int) -> int:
    if not cfg.sweep_N:
        raise ConfigError("missing required field [sweep] N")
    model = cfg.build_model()
    q = float(cfg.numerics["q"])
    n_dim = model.state_dim
    rows = [(N, n_dim, q, rate_bound(N, n_dim, q)) for N in sorted(cfg.sweep_N)]
    _write_csv(os.path.join(out, "rates.csv"), ["N", "n", "q", "rate_bound"], rows)
    files = ["rates.csv"]
    fits = []
    for name in ("value_gap_sq", "control_W2_int", "gamma_N", "chaos_W2", "z_sum"):
        path = os.path.join(out, f"{name}.csv")
        if os.path.exists(path):
            table = RateTable.from_csv(path)
            if len(table.rows) >= 3:
                s, i, r2 = fit_loglog_slope(table)
                fits.append((name, s, i, r2, int(np.sum(table.estimates > 0))))
    if fits:
        write_fits(os.path.join(out, "fits.csv"), fits)
        files.append("fits.csv")
    write_manifest(cfg, "rates", out, files)
    for N, n, qq, r in rows:
        print(f"N={N} n={n} q={qq} r={r!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfglab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "solve-mfg", "solve-nplayer", "converge", "rates"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="INI experiment file")
        s.add_argument("--seed", type=int, default=None, help="override [numerics] seed")
        s.add_argument("--out", default=None, help="output directory")
        s.add_argument("--threads", type=int, default=1, help="worker threads (speed only)")
        if name == "solve-nplayer":
            s.add_argument("--N", type=int, required=True, help="number of players")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, args.seed, args.out)
        out = cfg.directory
        os.makedirs(out, exist_ok=True)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, args.threads)
        if args.command == "solve-mfg":
            return cmd_solve_mfg(cfg, out, args.threads)
        if args.command == "solve-nplayer":
            return cmd_solve_nplayer(cfg, out, args.threads, args.N)
        if args.command == "converge":
            return cmd_converge(cfg, out, args.threads)
        return cmd_rates(cfg, out, args.threads)
    except (ConfigError, BudgetExceeded, ContractViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergence as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
