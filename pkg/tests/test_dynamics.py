import numpy as np
import pytest
import scipy.linalg

from wavemix.grid import State, eigenvalues, h1_sq, inner, to_phys
from wavemix.noise import NoiseModel, power_law_coeffs, sample_increment
from wavemix.dynamics import (
    BlowUpError,
    Integrator,
    PhysParams,
    RecordOptions,
    default_alpha,
    nonlinearity,
    quadratic_form_margin,
    run_trajectory,
    step_auxiliary,
    step_controlled,
    step_primal,
    step_truncated,
)
from wavemix.mixing import make_random_state, state_norm_H


class TestNonlinearity:
    def test_zero(self):
        assert np.all(nonlinearity(np.zeros(5), 0.5) == 0.0)

    def test_unit_values_odd(self):
        u = np.array([1.0, -1.0])
        out = nonlinearity(u, 0.3)
        assert out[0] == 1.0 and out[1] == -1.0

    def test_half_exponent_exact(self):
        assert nonlinearity(np.array([2.0]), 0.5)[0] == 4.0

    def test_odd_symmetry(self, rng):
        u = rng.standard_normal(32)
        for m in (0.25, 0.5, 0.75):
            assert np.allclose(nonlinearity(-u, m), -nonlinearity(u, m))

    def test_exponent_range(self):
        with pytest.raises(ValueError):
            nonlinearity(np.ones(3), 1.0)


class TestParams:
    def test_alpha_guard(self):
        with pytest.raises(ValueError, match="alpha"):
            PhysParams(gamma=0.5, m=0.5, alpha=0.2, h=np.zeros(8))

    def test_default_alpha(self):
        assert default_alpha(0.5) == 0.125
        assert default_alpha(4.0) == 0.25

    def test_quadratic_form_margin_nonnegative(self, small_params, small_grid, rng):
        assert quadratic_form_margin(small_params, small_grid, rng) >= 0.0


class TestIntegrator:
    def test_flow_matches_matrix_exponential(self, small_grid):
        gamma, dt = 0.7, 5e-3
        integ = Integrator(small_grid, gamma, dt)
        lam = eigenvalues(small_grid)
        for k in (0, 3, small_grid.n - 1):
            M = np.array([[0.0, 1.0], [-lam[k], -gamma]])
            E = scipy.linalg.expm(M * dt)
            got = np.array(
                [[integ.a_uu[k], integ.a_uv[k]], [integ.a_vu[k], integ.a_vv[k]]]
            )
            assert np.allclose(got, E, rtol=1e-12, atol=1e-12)

    def test_non_integral_horizon_rejected(self, small_integ):
        with pytest.raises(ValueError, match="multiple"):
            small_integ.steps_for(0.0031)

    def test_bad_dt(self, small_grid):
        with pytest.raises(ValueError):
            Integrator(small_grid, 0.5, 0.0)


class TestStepPrimal:
    def test_equilibrium(self, small_params, small_integ, small_grid):
        z = State(np.zeros(small_grid.n), np.zeros(small_grid.n))
        out = step_primal(z, small_params, None, small_integ)
        assert np.all(out.pos == 0.0) and np.all(out.vel == 0.0)

    def test_single_mode_energy_conserved_undamped(self, small_grid, small_params):
        integ0 = Integrator(small_grid, gamma=0.0, dt=2e-3)
        lam = eigenvalues(small_grid)
        k = 6
        rec = run_trajectory(
            State(to_phys(np.eye(small_grid.n)[k], small_grid), np.zeros(small_grid.n)),
            small_params, None, integ0, T=10000 * 2e-3, kind="linear",
            options=RecordOptions(sample_stride=2000, martingales=False),
        )
        U, V = rec.final_modes
        en = lam[k] * U[0, k] ** 2 + V[0, k] ** 2
        assert abs(en - lam[k]) / lam[k] < 1e-10

    def test_deterministic_energy_decay(self, small_params, small_integ, small_grid, rng):
        y0 = make_random_state(small_grid, rng, 2.0, small_params.alpha)
        rec = run_trajectory(y0, small_params, None, small_integ, T=5.0,
                             options=RecordOptions(sample_stride=10, martingales=False))
        E = rec.E[0]
        assert np.all(np.diff(E) <= 1e-12)

    def test_stepwise_dissipation_bound(self, small_params, small_integ, small_grid, rng):
        # discrete one-step version of the energy decay inequality
        y0 = make_random_state(small_grid, rng, 1.5, small_params.alpha)
        rec = run_trajectory(y0, small_params, None, small_integ, T=1.0,
                             options=RecordOptions(sample_stride=1, martingales=False))
        E = rec.E[0]
        dE = np.diff(E)
        bound = -small_params.alpha * E[:-1] * small_integ.dt + 1e-8 * (1 + E[:-1])
        assert np.all(dE <= bound)

    def test_noise_increment_dt_mismatch(self, small_params, small_integ, small_model, small_grid):
        inc = sample_increment(small_model, 1e-3)
        with pytest.raises(ValueError, match="dt"):
            step_primal(State(np.zeros(small_grid.n), np.zeros(small_grid.n)),
                        small_params, inc, small_integ)


class TestStepAuxiliary:
    def test_exact_fixed_point(self, small_params, small_integ, small_model, small_grid, rng):
        y = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        su, sv = y.copy(), y.copy()
        for j in range(200):
            inc = sample_increment(small_model, small_integ.dt, step=j)
            su2 = step_primal(su, small_params, inc, small_integ)
            sv = step_auxiliary(sv, su, small_params, inc, small_integ, N=8)
            su = su2
        dev = max(np.max(np.abs(su.pos - sv.pos)), np.max(np.abs(su.vel - sv.vel)))
        assert dev <= 1e-9  # in fact exact

    def test_rank_zero_reduces_to_primal(self, small_params, small_integ, small_model, small_grid, rng):
        y = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        driver = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        inc = sample_increment(small_model, small_integ.dt, step=0)
        a = step_auxiliary(y.copy(), driver, small_params, inc, small_integ, N=0)
        b = step_primal(y.copy(), small_params, inc, small_integ)
        assert np.array_equal(a.pos, b.pos) and np.array_equal(a.vel, b.vel)

    def test_full_rank_contracts_at_least_alpha(self, small_params, small_integ, small_model, small_grid, rng):
        from wavemix.coupling import run_coupled

        y0 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        d = make_random_state(small_grid, rng, 0.5, small_params.alpha)
        y0p = State(y0.pos + d.pos, y0.vel + d.vel)
        run = run_coupled(y0, y0p, small_params, small_model, small_integ,
                          N=small_model.K, T=8.0, paths=2, sample_stride=10)
        amp = np.sqrt(run.w_uv_sq[0] / run.w_uv_sq[0, 0])
        slope = np.polyfit(run.t, np.log(amp), 1)[0]
        assert slope <= -small_params.alpha


class TestStepTruncatedControlled:
    def test_zero_state(self, small_params, small_integ, small_grid):
        z = State(np.zeros(small_grid.n), np.zeros(small_grid.n))
        out = step_truncated(z, small_params, small_integ)
        assert np.all(out.pos == 0.0)

    def test_energy_nonincreasing(self, small_params, small_integ, small_grid, rng):
        y0 = make_random_state(small_grid, rng, 2.0, small_params.alpha)
        rec = run_trajectory(y0, small_params, None, small_integ, T=4.0, kind="truncated",
                             options=RecordOptions(sample_stride=20, martingales=False))
        assert np.all(np.diff(rec.E[0]) <= 1e-12)

    def test_matches_primal_without_forcing(self, small_params, small_integ, small_grid, rng):
        y0 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        a = step_truncated(y0.copy(), small_params, small_integ)
        b = step_primal(y0.copy(), small_params, None, small_integ)
        assert np.array_equal(a.pos, b.pos) and np.array_equal(a.vel, b.vel)

    def test_zero_control_matches_truncated(self, small_params, small_integ, small_grid, rng):
        y0 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        a = step_controlled(y0.copy(), small_params, np.zeros(small_grid.n), small_integ)
        b = step_truncated(y0.copy(), small_params, small_integ)
        assert np.array_equal(a.pos, b.pos) and np.array_equal(a.vel, b.vel)

    def test_control_continuity(self, small_params, small_grid, rng):
        # response to control differences is Lipschitz with a stable constant
        integ = Integrator(small_grid, small_params.gamma, 1e-3)
        y0 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        base = to_phys(np.eye(small_grid.n)[0], small_grid)
        omega = 2.0

        def run_with(c):
            g_dot = lambda t: c * np.cos(omega * t) * base
            rec = run_trajectory(y0, small_params, None, integ, T=2.0, kind="controlled",
                                 g_dot=g_dot,
                                 options=RecordOptions(sample_stride=50, martingales=False))
            return rec

        from wavemix.grid import h2_sq

        norm_base = np.sqrt(h2_sq(base, small_grid))
        cs = []
        for delta in (1e-2, 1e-3):
            r1, r2 = run_with(1.0), run_with(1.0 + delta)
            U1, V1 = r1.final_modes
            U2, V2 = r2.final_modes
            lam = eigenvalues(small_grid)
            q1 = V1 + small_params.alpha * U1
            q2 = V2 + small_params.alpha * U2
            dist = np.sqrt(np.sum(lam * (U1 - U2) ** 2) + np.sum((q1 - q2) ** 2))
            g_norm = delta * norm_base / omega  # sup_t ||int (g1-g2)||_2
            cs.append(dist / g_norm)
        assert 0.5 < cs[0] / cs[1] < 2.0  # linear response regime

    def test_decay_to_ball(self, small_params, small_grid, rng):
        integ = Integrator(small_grid, small_params.gamma, 2e-3)
        y0 = make_random_state(small_grid, rng, 2.0, small_params.alpha)
        rec = run_trajectory(y0, small_params, None, integ, T=30.0, kind="truncated",
                             options=RecordOptions(sample_stride=500, martingales=False))
        assert np.sqrt(rec.xi_H_sq[0, -1]) < 0.1


class TestRunner:
    def test_zero_horizon(self, small_params, small_integ, small_grid, rng):
        y0 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        rec = run_trajectory(y0, small_params, None, small_integ, T=0.0)
        assert rec.t.size == 0 and rec.E.shape == (1, 0)
        final = rec.final_states(small_grid)[0]
        assert np.allclose(final.pos, y0.pos, atol=1e-12)

    def test_observers_do_not_disturb(self, small_params, small_integ, small_model, small_grid, rng):
        y0 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        seen = []
        obs = [lambda v: seen.append(v.t), lambda v: v.vel_phys(), lambda v: None]
        r1 = run_trajectory(y0, small_params, small_model, small_integ, T=0.5)
        r2 = run_trajectory(y0, small_params, small_model, small_integ, T=0.5, observers=obs)
        assert np.array_equal(r1.final_modes[0], r2.final_modes[0])
        assert np.array_equal(r1.final_modes[1], r2.final_modes[1])
        assert len(seen) == r1.t.size

    def test_bitwise_reproducibility(self, small_params, small_integ, small_model, small_grid, rng):
        y0 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        r1 = run_trajectory(y0, small_params, small_model, small_integ, T=1.0)
        r2 = run_trajectory(y0, small_params, small_model, small_integ, T=1.0)
        assert np.array_equal(r1.E, r2.E)
        assert np.array_equal(r1.final_modes[1], r2.final_modes[1])

    def test_step_halving_second_order(self, small_params, small_grid, rng):
        # deterministic smooth run compared against a dt/4 reference
        y0 = make_random_state(small_grid, rng, 1.5, small_params.alpha)

        def terminal(dt):
            integ = Integrator(small_grid, small_params.gamma, dt)
            rec = run_trajectory(y0, small_params, None, integ, T=1.0,
                                 options=RecordOptions(sample_stride=10**9, martingales=False))
            return rec.final_modes

        ref = terminal(5e-4)
        errs = []
        for dt in (4e-3, 2e-3):
            U, V = terminal(dt)
            errs.append(np.sqrt(np.sum((U - ref[0]) ** 2) + np.sum((V - ref[1]) ** 2)))
        order = np.log2(errs[0] / errs[1])
        assert order > 1.8

    def test_blow_up_detected(self, small_params, small_grid):
        integ = Integrator(small_grid, small_params.gamma, 2e-3)
        huge = State(np.full(small_grid.n, 1e8), np.zeros(small_grid.n))
        with pytest.raises(BlowUpError):
            run_trajectory(huge, small_params, None, integ, T=0.2,
                           options=RecordOptions(sample_stride=1, martingales=False))
