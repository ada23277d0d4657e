import numpy as np
import pytest

from ensda.core import RandomSource
from ensda.integrators import (INTEGRATOR_KINDS, DivergenceError, PhasePoint,
                               TrajectorySpec, advance, draw_step_size,
                               integrate_trajectory, step_four_stage, step_hilbert,
                               step_three_stage, step_two_stage, step_verlet)

STEP_FUNCTIONS = {
    "verlet": step_verlet,
    "two-stage": step_two_stage,
    "three-stage": step_three_stage,
    "four-stage": step_four_stage,
    "hilbert": step_hilbert,
}


class FreePotential:
    def evaluate(self, x):
        return np.zeros(x.shape[:-1])

    def gradient(self, x):
        return np.zeros_like(x)


class HarmonicPotential:
    """J(x) = x^T K x / 2 with diagonal stiffness K."""

    def __init__(self, stiffness=1.0):
        self.stiffness = stiffness

    def evaluate(self, x):
        return 0.5 * np.sum(self.stiffness * x * x, axis=-1)

    def gradient(self, x):
        return self.stiffness * x


def harmonic_energy(z):
    return 0.5 * (z.x @ z.x + z.p @ z.p)


class TestFreeFlight:
    @pytest.mark.parametrize("kind", INTEGRATOR_KINDS)
    def test_splitting_drift_coefficients_sum_to_one(self, kind):
        # grad J = 0: one step must give x + h M^-1 p exactly (p unchanged)
        z = PhasePoint(np.array([1.0, -2.0]), np.array([0.5, 4.0]))
        mass = np.array([1.0, 2.0])
        h = 0.3
        out = STEP_FUNCTIONS[kind](z, h, mass, FreePotential())
        if kind == "hilbert":
            # pure rotation by angle h in each (x_i, p_i) plane instead
            assert np.allclose(out.x, np.cos(h) * z.x + np.sin(h) * z.p, atol=1e-14)
            assert np.allclose(out.p, -np.sin(h) * z.x + np.cos(h) * z.p, atol=1e-14)
        else:
            assert np.allclose(out.x, z.x + h * z.p / mass, atol=1e-12)
            assert np.allclose(out.p, z.p, atol=1e-14)


class TestVerletStep:
    def test_hand_stepped_harmonic_update(self):
        # J = x^2/2, M = 1, (x, p) = (1, 0), h = 0.1:
        #   x_half = 1, p+ = -0.1, x+ = 1 + 0.05 * (-0.1) = 0.995
        z = PhasePoint(np.array([1.0]), np.array([0.0]))
        out = step_verlet(z, 0.1, np.array([1.0]), HarmonicPotential())
        assert out.p[0] == pytest.approx(-0.1, abs=1e-15)
        assert out.x[0] == pytest.approx(0.995, abs=1e-15)

    def test_divergence_error_on_nonfinite(self):
        class BadPotential(FreePotential):
            def gradient(self, x):
                return np.full_like(x, np.nan)

        z = PhasePoint(np.ones(2), np.ones(2))
        with pytest.raises(DivergenceError):
            step_verlet(z, 0.1, np.ones(2), BadPotential())


@pytest.mark.parametrize("kind", INTEGRATOR_KINDS)
def test_reversibility(kind):
    # step, negate momentum, step, negate momentum: back to the start
    g = np.random.default_rng(1)
    x = g.standard_normal(4)
    p = g.standard_normal(4)
    mass = g.uniform(0.5, 2.0, 4)
    pot = HarmonicPotential(stiffness=g.uniform(0.5, 3.0, 4))
    step = STEP_FUNCTIONS[kind]
    fwd = step(PhasePoint(x, p), 0.1, mass, pot)
    back = step(PhasePoint(fwd.x, -fwd.p), 0.1, mass, pot)
    assert np.abs(back.x - x).max() < 1e-12
    assert np.abs(-back.p - p).max() < 1e-12


@pytest.mark.parametrize("kind", INTEGRATOR_KINDS)
def test_one_step_volume_determinant(kind):
    # finite-difference Jacobian of the phase-space map at 2 n_var = 4
    n = 2
    g = np.random.default_rng(2)
    z0 = g.standard_normal(2 * n)
    mass = np.array([1.0, 1.7])
    pot = HarmonicPotential(stiffness=np.array([1.0, 2.5]))
    h = 0.1

    def flat_step(v):
        out = STEP_FUNCTIONS[kind](PhasePoint(v[:n].copy(), v[n:].copy()), h, mass, pot)
        return np.concatenate([out.x, out.p])

    jac = np.empty((2 * n, 2 * n))
    delta = 1e-6
    for j in range(2 * n):
        vp, vm = z0.copy(), z0.copy()
        vp[j] += delta
        vm[j] -= delta
        jac[:, j] = (flat_step(vp) - flat_step(vm)) / (2 * delta)
    assert abs(np.linalg.det(jac) - 1.0) < 1e-6


class TestHilbertStep:
    def test_zero_step_is_identity(self):
        z = PhasePoint(np.array([1.0, 2.0]), np.array([-0.5, 0.25]))
        out = step_hilbert(z, 0.0, np.ones(2), HarmonicPotential())
        assert np.array_equal(out.x, z.x)
        assert np.array_equal(out.p, z.p)

    def test_unit_harmonic_norm_drift_is_second_order_per_step(self):
        # J = x^T x / 2, M = I: the exact flow conserves |x|^2 + |p|^2. The
        # map loses it at O(h^2) per step (the kicks re-add the harmonic force
        # the rotation already applied), so halving h quarters the loss.
        def one_step_drift(h):
            z = PhasePoint(np.array([1.0]), np.array([0.0]))
            start = z.x @ z.x + z.p @ z.p
            out = step_hilbert(z, h, np.ones(1), HarmonicPotential())
            return abs(out.x @ out.x + out.p @ out.p - start)

        ratio = one_step_drift(0.01) / one_step_drift(0.005)
        assert 3.5 < ratio < 4.5

    def test_free_flight_norm_conservation_over_100_steps(self):
        # with a vanishing gradient the map is the pure rotation it was built
        # around, and |x|^2 + |p|^2 is conserved to machine precision
        g = np.random.default_rng(3)
        z = PhasePoint(g.standard_normal(5), g.standard_normal(5))
        start = z.x @ z.x + z.p @ z.p
        worst = 0.0
        for _ in range(100):
            z = step_hilbert(z, 0.01, np.ones(5), FreePotential())
            worst = max(worst, abs(z.x @ z.x + z.p @ z.p - start))
        assert worst < 1e-12


def test_three_stage_beats_verlet_on_energy_error():
    # 100 steps on the unit harmonic oscillator; oracle is the exact rotation
    pot = HarmonicPotential()
    mass = np.ones(1)
    errs = {}
    for kind in ("verlet", "three-stage"):
        z = PhasePoint(np.array([1.0]), np.array([0.0]))
        e0 = harmonic_energy(z)
        worst = 0.0
        for _ in range(100):
            z = STEP_FUNCTIONS[kind](z, 0.1, mass, pot)
            worst = max(worst, abs(harmonic_energy(z) - e0))
        errs[kind] = worst
    assert errs["three-stage"] < errs["verlet"]


def test_verlet_energy_error_is_second_order():
    # halving h reduces the energy error by about 4x over a fixed interval
    pot = HarmonicPotential()
    mass = np.ones(1)

    def energy_error(h, steps):
        z = PhasePoint(np.array([1.0]), np.array([0.0]))
        e0 = harmonic_energy(z)
        worst = 0.0
        for _ in range(steps):
            z = step_verlet(z, h, mass, pot)
            worst = max(worst, abs(harmonic_energy(z) - e0))
        return worst

    ratio = energy_error(0.1, 100) / energy_error(0.05, 200)
    assert 3.0 < ratio < 5.0


class TestTrajectorySpec:
    def test_stability_warning_outside_interval(self):
        with pytest.warns(UserWarning):
            TrajectorySpec(kind="two-stage", step=3.0, n_steps=1)

    def test_no_warning_inside_interval(self):
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            TrajectorySpec(kind="two-stage", step=2.0, n_steps=1)
            TrajectorySpec(kind="three-stage", step=4.0, n_steps=1)
            TrajectorySpec(kind="four-stage", step=5.0, n_steps=1)

    def test_validation(self):
        with pytest.raises(ValueError):
            TrajectorySpec(kind="midpoint")
        with pytest.raises(ValueError):
            TrajectorySpec(step=-0.1)
        with pytest.raises(ValueError):
            TrajectorySpec(n_steps=0)


class TestIntegrateTrajectory:
    def test_single_step_equals_step_function(self):
        spec = TrajectorySpec(kind="two-stage", step=0.05, n_steps=1)
        z = PhasePoint(np.array([0.3, -1.0]), np.array([0.7, 0.2]))
        mass = np.array([1.0, 2.0])
        pot = HarmonicPotential(stiffness=np.array([1.0, 0.5]))
        end, rec = integrate_trajectory(z, spec, mass, pot, RandomSource(5))
        manual = step_two_stage(z, rec.h, mass, pot)
        assert np.allclose(end.x, manual.x, atol=1e-15)
        assert np.allclose(end.p, manual.p, atol=1e-15)

    def test_step_randomization_range_and_determinism(self):
        spec = TrajectorySpec(kind="verlet", step=0.01, n_steps=3, jitter=0.2)
        z = PhasePoint(np.zeros(2), np.ones(2))
        end1, rec1 = integrate_trajectory(z, spec, np.ones(2), FreePotential(),
                                          RandomSource(9))
        end2, rec2 = integrate_trajectory(z, spec, np.ones(2), FreePotential(),
                                          RandomSource(9))
        assert rec1.h == rec2.h
        assert 0.008 <= rec1.h <= 0.012
        assert np.array_equal(end1.x, end2.x)

    def test_harmonic_endpoint_matches_exact_rotation(self):
        # (x, p) = (1, 0) under J = x^2/2 rotates as (cos T, -sin T)
        spec = TrajectorySpec(kind="verlet", step=0.01, n_steps=100)
        z = PhasePoint(np.array([1.0]), np.array([0.0]))
        end, rec = integrate_trajectory(z, spec, np.ones(1), HarmonicPotential(),
                                        RandomSource(3))
        T = rec.h * spec.n_steps
        assert end.x[0] == pytest.approx(np.cos(T), abs=1e-3)
        assert end.p[0] == pytest.approx(-np.sin(T), abs=1e-3)

    def test_gradient_evaluations_counted(self):
        pot = HarmonicPotential()
        z = PhasePoint(np.ones(2), np.ones(2))
        per_step = {"verlet": 1, "two-stage": 2, "three-stage": 3, "four-stage": 4}
        for kind, n in per_step.items():
            rec = advance(z, kind, 0.01, 7, np.ones(2), pot)
            assert rec.n_grad_evals == 7 * n
        # hilbert reuses the end-of-step gradient: m + 1 evaluations
        rec = advance(z, "hilbert", 0.01, 7, np.ones(2), pot)
        assert rec.n_grad_evals == 8

    def test_recorded_path_has_intermediate_states(self):
        z = PhasePoint(np.ones(3), np.zeros(3))
        rec = advance(z, "hilbert", 0.05, 4, np.ones(3), HarmonicPotential(),
                      record_path=True)
        assert len(rec.path) == 3
        assert rec.grad_start is not None and rec.grad_end is not None

    def test_batched_trajectories_match_individual(self):
        pot = HarmonicPotential(stiffness=np.array([1.0, 2.0]))
        mass = np.array([0.5, 1.5])
        g = np.random.default_rng(8)
        xs = g.standard_normal((3, 2))
        ps = g.standard_normal((3, 2))
        hs = np.array([0.01, 0.02, 0.03])
        rec = advance(PhasePoint(xs, ps), "three-stage", hs, 5, mass, pot)
        for i in range(3):
            single = advance(PhasePoint(xs[i], ps[i]), "three-stage", hs[i], 5,
                             mass, pot)
            assert np.allclose(rec.end.x[i], single.end.x, atol=1e-14)
            assert np.allclose(rec.end.p[i], single.end.p, atol=1e-14)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_error_propagates(self):
        spec = TrajectorySpec(kind="verlet", step=10.0, n_steps=50, jitter=0.0)
        z = PhasePoint(np.full(2, 1.0e4), np.full(2, 1.0e4))
        steep = HarmonicPotential(stiffness=1.0e8)
        with pytest.raises(DivergenceError):
            integrate_trajectory(z, spec, np.ones(2), steep, RandomSource(0))


def test_draw_step_size_uniform_window():
    spec = TrajectorySpec(kind="verlet", step=0.02, n_steps=1, jitter=0.2)
    g = RandomSource(17).generator
    draws = np.array([draw_step_size(spec, g) for _ in range(2000)])
    assert draws.min() >= 0.016 and draws.max() <= 0.024
    assert draws.min() < 0.0165 and draws.max() > 0.0235  # fills the window
