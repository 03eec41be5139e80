import csv
import hashlib
import json
import os

import numpy as np
import pytest

from mfglab import RateTable
from mfglab.cli import main
from mfglab.config import ConfigError, parse_config
from mfglab.metrics import rate_bound
from mfglab.paths import read_ensemble

BASE = """
[model]
tag = case_study
{model}
[numerics]
K = 10
M = 2000
seed = 5
scenario_budget = 2000
min_scenarios = 200
{numerics}
[sweep]
N = 2, 4, 8
"""


def write_config(tmp_path, model="g = cos\ng_scale = 0.5", numerics="", name="exp.ini"):
    path = tmp_path / name
    path.write_text(BASE.format(model=model, numerics=numerics))
    return str(path)


def run(tmp_path, command, cfg, out="out", *extra):
    out_dir = str(tmp_path / out)
    return main([command, "--config", cfg, "--out", out_dir, *extra]), out_dir


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_simulate_writes_ensemble_and_summary(tmp_path):
    code, out = run(tmp_path, "simulate", write_config(tmp_path))
    assert code == 0
    ens = read_ensemble(os.path.join(out, "paths.bin"))
    assert ens.states.shape == (2000, 11, 1) and ens.seed == 5
    rows = read_rows(os.path.join(out, "paths_summary.csv"))
    assert rows[0] == ["step", "t", "mean", "var"]
    assert float(rows[-1][3]) == pytest.approx(1.0, abs=0.1)


def test_solve_mfg_outputs(tmp_path, capsys):
    code, out = run(tmp_path, "solve-mfg", write_config(tmp_path))
    assert code == 0
    assert "Y0 =" in capsys.readouterr().out
    picard = read_rows(os.path.join(out, "picard.csv"))
    assert picard[0] == ["iter", "distance_z", "distance_xi", "factor"]
    snaps = read_rows(os.path.join(out, "law_snapshots.csv"))
    assert len(snaps) == 12
    q = np.array(snaps[1:], dtype=float)[:, 2:7]
    assert np.all(np.diff(q, axis=1) >= 0)
    summary = read_rows(os.path.join(out, "mfg_summary.csv"))
    assert summary[1][3] == "1"


def test_solve_nplayer_outputs(tmp_path, capsys):
    code, out = run(tmp_path, "solve-nplayer", write_config(tmp_path), "out", "--N", "4")
    assert code == 0
    assert "z_sum" in capsys.readouterr().out
    summary = read_rows(os.path.join(out, "nplayer_summary.csv"))
    assert summary[0] == ["N", "scenarios", "Y0", "se", "spread", "iterations", "z_sum"]
    assert summary[1][:2] == ["4", "500"]
    assert os.path.exists(os.path.join(out, "control_cloud_N4.csv"))


def test_converge_tables_and_manifest(tmp_path):
    cfg = write_config(tmp_path)
    code, out = run(tmp_path, "converge", cfg)
    assert code == 0
    with open(os.path.join(out, "manifest.json")) as fh:
        manifest = json.load(fh)
    assert manifest["seed"] == 5 and manifest["partial"] is False
    assert set(manifest["versions"]) >= {"mfglab", "numpy", "scipy", "python"}
    assert len(manifest["config_hash"]) == 64
    for name, digest in manifest["outputs"].items():
        with open(os.path.join(out, name), "rb") as fh:
            assert hashlib.sha256(fh.read()).hexdigest() == digest
    gap = RateTable.from_csv(os.path.join(out, "value_gap_sq.csv"))
    assert list(gap.N) == [2, 4, 8]
    expected = [rate_bound(N, 1, 3.0) + 1.0 / N for N in (2, 4, 8)]
    np.testing.assert_allclose([r.theory_bound for r in gap.rows], expected, rtol=1e-15)
    fits = read_rows(os.path.join(out, "fits.csv"))
    assert [r[0] for r in fits[1:]] == ["value_gap_sq", "control_W2_int", "gamma_N",
                                        "chaos_W2", "z_sum"]


def test_converge_is_reproducible_and_thread_invariant(tmp_path):
    cfg = write_config(tmp_path)
    outs = [run(tmp_path, "converge", cfg, name, "--threads", t)[1]
            for name, t in (("a", "1"), ("b", "1"), ("c", "8"))]
    for fname in sorted(os.listdir(outs[0])):
        if not fname.endswith(".csv"):
            continue
        data = [open(os.path.join(o, fname), "rb").read() for o in outs]
        assert data[0] == data[1] == data[2], fname


def test_seed_override_changes_results(tmp_path):
    cfg = write_config(tmp_path)
    _, a = run(tmp_path, "solve-mfg", cfg, "a")
    _, b = run(tmp_path, "solve-mfg", cfg, "b", "--seed", "6")
    assert (open(os.path.join(a, "mfg_summary.csv")).read()
            != open(os.path.join(b, "mfg_summary.csv")).read())
    with open(os.path.join(b, "manifest.json")) as fh:
        assert json.load(fh)["seed"] == 6


def test_zero_rewards_skip_slope_fits(tmp_path):
    cfg = write_config(tmp_path, model="f = zero\ng = zero")
    code, out = run(tmp_path, "converge", cfg)
    assert code == 0
    for name in ("value_gap_sq", "control_W2_int", "chaos_W2", "z_sum"):
        assert np.all(RateTable.from_csv(os.path.join(out, f"{name}.csv")).estimates == 0.0)
    fitted = [r[0] for r in read_rows(os.path.join(out, "fits.csv"))[1:]]
    assert "value_gap_sq" not in fitted
    with open(os.path.join(out, "manifest.json")) as fh:
        notes = json.load(fh)["notes"]
    assert any("slope fit skipped for value_gap_sq" in n for n in notes)


def test_rates_subcommand(tmp_path):
    cfg = write_config(tmp_path)
    code, out = run(tmp_path, "rates", cfg)
    assert code == 0
    rows = read_rows(os.path.join(out, "rates.csv"))
    assert rows[0] == ["N", "n", "q", "rate_bound"]
    assert float(rows[2][3]) == rate_bound(4, 1, 3.0)
    # with converge tables present the fits are refreshed
    run(tmp_path, "converge", cfg)
    code, _ = run(tmp_path, "rates", cfg)
    assert code == 0 and os.path.exists(os.path.join(out, "fits.csv"))


class TestExitCodes:
    def test_missing_field_named(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text("[model]\ntag = case_study\n[numerics]\nK = 5\nseed = 1\n")
        code, _ = run(tmp_path, "solve-mfg", str(path))
        assert code == 2
        assert "[numerics] M" in capsys.readouterr().err

    def test_invalid_values(self, tmp_path):
        assert run(tmp_path, "solve-mfg", write_config(tmp_path, numerics="tol_picard = 0"))[0] == 2
        assert run(tmp_path, "solve-mfg", write_config(tmp_path, numerics="K = x"))[0] == 2
        assert run(tmp_path, "solve-mfg", write_config(tmp_path), "o", "--seed", "-1")[0] == 2
        assert run(tmp_path, "converge", write_config(tmp_path, numerics="q = 1.5"))[0] == 2

    def test_missing_sweep(self, tmp_path, capsys):
        path = tmp_path / "nosweep.ini"
        path.write_text(BASE.format(model="", numerics="").replace("N = 2, 4, 8", ""))
        assert run(tmp_path, "converge", str(path))[0] == 2
        assert "[sweep] N" in capsys.readouterr().err

    def test_nonconvergence(self, tmp_path):
        cfg = write_config(tmp_path, numerics="tol_picard = 1e-12\nmax_iter = 2")
        assert run(tmp_path, "solve-mfg", cfg)[0] == 3

    def test_numerical_abort(self, tmp_path):
        cfg = write_config(tmp_path, model="sigma = inf")
        assert run(tmp_path, "simulate", cfg)[0] == 4

    def test_budget_cap(self, tmp_path):
        cfg = write_config(tmp_path, numerics="budget_cap = 1000")
        assert run(tmp_path, "solve-nplayer", cfg, "out", "--N", "2")[0] == 2

    def test_partial_sweep_flagged(self, tmp_path):
        cfg = write_config(tmp_path, numerics="tol_fp = 1e-15\nnplayer_max_iter = 1")
        code, out = run(tmp_path, "converge", cfg)
        assert code == 3
        with open(os.path.join(out, "manifest.json")) as fh:
            manifest = json.load(fh)
        assert manifest["partial"] is True
        assert "mfg_summary.csv" in manifest["outputs"]
        assert "value_gap_sq.csv" not in manifest["outputs"]


class TestConfig:
    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match="bogus"):
            parse_config(BASE.format(model="bogus = 1", numerics=""))

    def test_duplicate_sweep_values(self):
        with pytest.raises(ConfigError):
            parse_config(BASE.format(model="", numerics="").replace("2, 4, 8", "2, 2"))

    def test_hash_ignores_comments(self):
        a = parse_config(BASE.format(model="", numerics=""))
        b = parse_config("# note\n" + BASE.format(model="", numerics=""))
        assert a.content_hash() == b.content_hash()
        c = parse_config(BASE.format(model="kappa1 = 2", numerics=""))
        assert c.content_hash() != a.content_hash()


def test_delay_model_flags_feature_w2(tmp_path):
    path = tmp_path / "delay.ini"
    path.write_text("[model]\ntag = delay_toy\n[numerics]\nK = 8\nM = 1000\nseed = 2\n")
    code, out = run(tmp_path, "solve-mfg", str(path))
    assert code == 0
    with open(os.path.join(out, "manifest.json")) as fh:
        assert any(n.startswith("feature-W2") for n in json.load(fh)["notes"])
