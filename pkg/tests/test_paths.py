import numpy as np
import pytest

from mfglab import (NumericalAbort, TimeGrid, case_study, girsanov_weights,
                    reweighted_expectation, simulate_state_paths)
from mfglab.core import EmpiricalMeasure, ModelSpec
from mfglab.paths import (PathEnsemble, WeightEnsemble, brownian_increments, read_ensemble,
                          write_ensemble)

GRID = TimeGrid(1.0, 20)


class ConstantFlow:
    """Measure slice indexable by the time step."""

    def __getitem__(self, k):
        return EmpiricalMeasure(np.zeros((1, 1)), np.zeros(1))


def sigma_model(sigma):
    return case_study(kappa1=0.0, sigma=sigma)


def test_zero_volatility_stays_at_start():
    p = simulate_state_paths(sigma_model(0.0), GRID, 50, seed=1, X_0=0.7)
    assert np.all(p.states == 0.7)


def test_terminal_variance_is_horizon():
    M = 100_000
    p = simulate_state_paths(sigma_model(1.0), GRID, M, seed=2)
    xT = p.states[:, -1, 0]
    var = xT.var(ddof=1)
    # standard error of the sample variance of a Gaussian
    se = np.sqrt(2.0 / (M - 1)) * 1.0
    assert abs(var - 1.0) <= 3 * se


def test_same_seed_same_arrays():
    a = simulate_state_paths(sigma_model(1.0), GRID, 700, seed=9)
    b = simulate_state_paths(sigma_model(1.0), GRID, 700, seed=9)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.increments, b.increments)
    c = simulate_state_paths(sigma_model(1.0), GRID, 700, seed=10)
    assert not np.array_equal(a.increments, c.increments)


def test_thread_count_invariance():
    a = simulate_state_paths(sigma_model(1.0), GRID, 3000, seed=4, threads=1)
    b = simulate_state_paths(sigma_model(1.0), GRID, 3000, seed=4, threads=8)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.increments.tobytes() == b.increments.tobytes()


def test_ensembles_are_nested_in_M():
    small = brownian_increments(5, 100, GRID)
    large = brownian_increments(5, 1500, GRID)
    np.testing.assert_array_equal(small, large[:100])


@pytest.mark.parametrize("sigma", [1.0, 2.0])
def test_euler_is_scaled_increment_sum(sigma):
    p = simulate_state_paths(sigma_model(sigma), GRID, 200, seed=3, X_0=0.0)
    expected = np.zeros_like(p.states[..., 0])
    for k in range(GRID.steps):
        expected[:, k + 1] = expected[:, k] + sigma * p.increments[:, k, 0]
    np.testing.assert_array_equal(p.states[..., 0], expected)


def test_non_finite_volatility_names_path():
    base = sigma_model(1.0)

    def vol(t, path):
        x = path.current
        s = np.ones(x.shape[:-1] + (1, 1))
        s[37] = np.nan
        return s

    m = ModelSpec("bad", 1, 1, base.action_set, vol, base.drift, base.running_reward,
                  base.terminal_reward)
    with pytest.raises(NumericalAbort, match="37"):
        simulate_state_paths(m, GRID, 60, seed=0)


def test_binary_roundtrip(tmp_path):
    p = simulate_state_paths(sigma_model(1.3), TimeGrid(2.0, 7), 33, seed=2 ** 63 + 5, X_0=0.1)
    f = tmp_path / "ens.bin"
    write_ensemble(f, p)
    raw = f.read_bytes()
    assert raw[:4] == b"MFGB"
    assert len(raw) == 4 + 4 + 5 * 8 + 8 * (33 * 8 + 33 * 7)
    q = read_ensemble(f, horizon=2.0)
    np.testing.assert_array_equal(q.states, p.states)
    np.testing.assert_array_equal(q.increments, p.increments)
    assert q.seed == p.seed and q.grid == p.grid


class TestGirsanov:
    def test_zero_drift_unit_weights(self):
        m = sigma_model(1.0)
        p = simulate_state_paths(m, GRID, 100, seed=1)
        w = girsanov_weights(m, p, np.zeros((100, GRID.steps)), ConstantFlow())
        assert np.all(w.weights == 1.0) and w.clip_count == 0

    def test_single_step_hand_value(self):
        m = sigma_model(1.0)
        grid = TimeGrid(0.1, 1)
        p = simulate_state_paths(m, grid, 1, seed=0, increments=np.full((1, 1, 1), 0.2))
        w = girsanov_weights(m, p, np.ones((1, 1)), ConstantFlow())
        assert w.terminal[0] == pytest.approx(np.exp(0.2 - 0.05), rel=1e-14)
        assert w.terminal[0] == pytest.approx(1.161834, abs=1e-6)

    def test_martingale_mean_all_times(self):
        M = 100_000
        m = sigma_model(1.0)
        p = simulate_state_paths(m, GRID, M, seed=12)
        w = girsanov_weights(m, p, np.ones((M, GRID.steps)), ConstantFlow())
        assert w.clip_count == 0
        for k in range(GRID.steps + 1):
            wk = w.at(k)
            se = wk.std(ddof=1) / np.sqrt(M)
            assert abs(wk.mean() - 1.0) <= 4 * se + 1e-15

    def test_clipping_is_counted(self):
        m = sigma_model(1.0)
        grid = TimeGrid(1.0, 2)
        p = simulate_state_paths(m, grid, 1, seed=0, increments=np.full((1, 2, 1), 100.0))
        w = girsanov_weights(m, p, np.ones((1, 2)), ConstantFlow())
        assert w.clip_count == 2
        assert w.log_weights[0, -1] == 60.0


class TestReweightedExpectation:
    def test_unit_weights_plain_mean(self):
        v = np.arange(10.0)
        est, se = reweighted_expectation(v, None)
        assert est == pytest.approx(4.5)
        assert se == pytest.approx(v.std(ddof=1) / np.sqrt(10))

    def test_constant_values(self):
        rng = np.random.default_rng(0)
        w = WeightEnsemble(np.column_stack([np.zeros(50), rng.normal(size=50)]))
        est, _ = reweighted_expectation(np.full(50, 3.0), w)
        assert est == pytest.approx(3.0 * w.terminal.mean(), rel=1e-14)
        est_sn, _ = reweighted_expectation(np.full(50, 3.0), w, self_normalized=True)
        assert est_sn == pytest.approx(3.0, rel=1e-14)

    def test_girsanov_mean_shift(self):
        M, b, x0 = 100_000, 0.6, 0.25
        m = sigma_model(1.0)
        p = simulate_state_paths(m, GRID, M, seed=21, X_0=x0)
        w = girsanov_weights(m, p, np.full((M, GRID.steps), b), ConstantFlow())
        est, se = reweighted_expectation(p.states[:, -1, 0], w)
        assert abs(est - (x0 + b * GRID.horizon)) <= 3 * se

    def test_zero_weights_rejected(self):
        w = WeightEnsemble(np.full((3, 2), -np.inf))
        with pytest.raises(ValueError):
            reweighted_expectation(np.ones(3), w)
