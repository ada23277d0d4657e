import numpy as np
import pytest

from ensda.core import DimensionMismatchError, rmse
from ensda.model import (BlowUpError, Lorenz96Config, propagate,
                         reference_initial_condition, tendency)

CFG = Lorenz96Config()


def brute_force_tendency(x, forcing):
    """Index-by-index stencil oracle with explicit cyclic wrapping."""
    n = len(x)
    out = np.empty(n)
    for i in range(n):
        out[i] = x[(i - 1) % n] * (x[(i + 1) % n] - x[(i - 2) % n]) - x[i] + forcing
    return out


class TestTendency:
    def test_equilibrium_at_forcing(self):
        x = np.full(40, CFG.forcing)
        assert np.allclose(tendency(x, CFG), 0.0, atol=1e-14)

    def test_zero_state_gives_constant_forcing(self):
        assert np.allclose(tendency(np.zeros(40), CFG), CFG.forcing)

    def test_against_brute_force_stencil(self):
        cfg = Lorenz96Config(n_var=5, forcing=0.0)
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        expected = brute_force_tendency(x, 0.0)
        # spot check component 3 (1-based): x2 (x4 - x1) - x3 = 2 * 3 - 3 = 3
        assert expected[2] == 3.0
        assert np.allclose(tendency(x, cfg), expected)

    def test_random_states_match_oracle(self):
        g = np.random.default_rng(0)
        for _ in range(5):
            x = g.standard_normal(40) * 5
            assert np.allclose(tendency(x, CFG), brute_force_tendency(x, CFG.forcing),
                               atol=1e-12)

    def test_cyclic_symmetry(self):
        g = np.random.default_rng(1)
        x = g.standard_normal(40)
        for shift in (1, 7, 39):
            rotated = np.roll(x, shift)
            assert np.allclose(tendency(rotated, CFG), np.roll(tendency(x, CFG), shift),
                               atol=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            tendency(np.zeros(13), CFG)


class TestPropagate:
    def test_equilibrium_is_preserved(self):
        x = np.full(40, CFG.forcing)
        out = propagate(x, 0.0, 3.0, CFG)
        assert np.allclose(out, x, atol=1e-10)

    def test_zero_interval_returns_input(self):
        x = np.linspace(-1, 1, 40)
        out = propagate(x, 2.0, 2.0, CFG)
        assert np.array_equal(out, x)
        assert out is not x

    def test_semigroup_property(self):
        x = reference_initial_condition(CFG)
        direct = propagate(x, 0.0, 0.4, CFG)
        chained = propagate(propagate(x, 0.0, 0.25, CFG), 0.25, 0.4, CFG)
        assert np.allclose(direct, chained, atol=1e-12)

    def test_partial_final_step_lands_on_t1(self):
        x = reference_initial_condition(CFG)
        # 0.0128 = 2 full steps of 0.005 plus a 0.0028 remainder
        out = propagate(x, 0.0, 0.0128, CFG)
        fine = propagate(x, 0.0, 0.0128, Lorenz96Config(dt=0.0001))
        assert np.allclose(out, fine, atol=1e-8)

    def test_trajectory_stays_bounded(self):
        # spin-up state integrated 10 more units: chaos stays on the attractor
        x = reference_initial_condition(CFG)
        coarse = Lorenz96Config(dt=0.02)
        peak = 0.0
        peak_coarse = 0.0
        xc = x.copy()
        for _ in range(100):
            x = propagate(x, 0.0, 0.1, CFG)
            xc = propagate(xc, 0.0, 0.1, coarse)
            peak = max(peak, np.abs(x).max())
            peak_coarse = max(peak_coarse, np.abs(xc).max())
        assert peak < 20.0
        assert peak_coarse < 20.0  # independent coarse-step confirmation

    def test_rk4_is_fourth_order(self):
        x0 = reference_initial_condition(CFG)
        ref = propagate(x0, 0.0, 0.1, Lorenz96Config(dt=0.005 / 8))
        err_h = rmse(propagate(x0, 0.0, 0.1, Lorenz96Config(dt=0.004)), ref)
        err_h2 = rmse(propagate(x0, 0.0, 0.1, Lorenz96Config(dt=0.002)), ref)
        ratio = err_h / err_h2
        assert 10.0 < ratio < 22.0  # nominal 16x per halving

    def test_blow_up_reports_time(self):
        # uniform states decay; an alternating huge state drives the quadratic term
        x = 1.0e7 * (-1.0) ** np.arange(40)
        with pytest.raises(BlowUpError) as err:
            propagate(x, 0.0, 1.0, CFG)
        assert 0.0 < err.value.time <= 1.0

    def test_batch_propagation_matches_loop(self):
        g = np.random.default_rng(2)
        batch = g.standard_normal((3, 40)) * 2
        out = propagate(batch, 0.0, 0.2, CFG)
        for i in range(3):
            assert np.array_equal(out[i], propagate(batch[i], 0.0, 0.2, CFG))


class TestReferenceInitialCondition:
    def test_pre_spinup_profile(self):
        x = np.linspace(-2.0, 2.0, 40)
        assert x[0] == -2.0
        assert x[-1] == 2.0
        assert np.allclose(np.diff(x), 4.0 / 39.0)

    def test_deterministic(self):
        a = reference_initial_condition(CFG)
        b = reference_initial_condition(CFG)
        assert np.array_equal(a, b)

    def test_spinup_forgets_initial_profile(self):
        pre = np.linspace(-2.0, 2.0, 40)
        post = reference_initial_condition(CFG)
        assert rmse(post, pre) > 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        Lorenz96Config(n_var=3)
    with pytest.raises(ValueError):
        Lorenz96Config(dt=0.0)
