import numpy as np
import pytest

from wavemix.grid import State, to_modes, to_phys
from wavemix.noise import project_Q_N, sample_increment
from wavemix.dynamics import Integrator, nonlinearity, step_auxiliary, step_primal
from wavemix.coupling import (
    StoppingConfig,
    calibrate_stopping,
    detect_separation,
    detect_stopping,
    foias_prodi_check,
    girsanov_drift_step,
    run_coupled,
    tv_surrogate,
)
from wavemix.mixing import make_random_state


@pytest.fixture()
def coupled_pair(small_grid, small_params, rng):
    y0 = make_random_state(small_grid, rng, 1.5, small_params.alpha)
    d = make_random_state(small_grid, rng, 0.8, small_params.alpha)
    return y0, State(y0.pos + d.pos, y0.vel + d.vel)


class TestRunCoupled:
    def test_identical_starts_stay_synchronised(self, small_params, small_integ, small_model, small_grid, rng):
        y0 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        run = run_coupled(y0, y0, small_params, small_model, small_integ,
                          N=8, T=1.0, paths=3, sample_stride=5)
        assert np.max(run.w_uv_sq) <= 1e-18
        assert np.max(run.w_uup_sq) <= 1e-18
        assert np.all(run.drift_cum == 0.0)

    def test_rank_zero_degenerates_to_second_primal(self, small_params, small_integ, small_model, coupled_pair):
        y0, y0p = coupled_pair
        run = run_coupled(y0, y0p, small_params, small_model, small_integ,
                          N=0, T=0.5, paths=2, sample_stride=5)
        Uv, Vv = run.final_modes["v"]
        Up, Vp = run.final_modes["up"]
        assert np.array_equal(Uv, Up) and np.array_equal(Vv, Vp)

    def test_shared_noise_checksums(self, small_params, small_integ, small_model, coupled_pair):
        y0, y0p = coupled_pair
        run = run_coupled(y0, y0p, small_params, small_model, small_integ,
                          N=8, T=0.5, paths=2, sample_stride=5)
        assert np.array_equal(run.increment_checksums["u"], run.increment_checksums["up"])
        assert np.array_equal(run.increment_checksums["u"], run.increment_checksums["v"])

    def test_w_equation_consistency(self, small_params, small_model, small_grid, coupled_pair):
        # stepping the difference directly with the projected-residual forcing
        # reproduces u - v from the coupled pair
        y0, y0p = coupled_pair
        N = 8
        integ = Integrator(small_grid, small_params.gamma, 1e-3)
        su, sv = y0.copy(), y0p.copy()
        W = to_modes(su.pos - sv.pos, small_grid)
        Wd = to_modes(su.vel - sv.vel, small_grid)

        def w_kick(u_phys, v_phys):
            diff = to_modes(
                nonlinearity(u_phys, small_params.m) - nonlinearity(v_phys, small_params.m),
                small_grid,
            )
            diff[:N] = 0.0
            return -diff

        for j in range(1000):
            inc = sample_increment(small_model, integ.dt, step=j)
            Wd = Wd + 0.5 * integ.dt * w_kick(su.pos, sv.pos)
            W, Wd = integ.flow(W, Wd)
            su2 = step_primal(su, small_params, inc, integ)
            sv = step_auxiliary(sv, su, small_params, inc, integ, N=N)
            su = su2
            Wd = Wd + 0.5 * integ.dt * w_kick(su.pos, sv.pos)
        w_direct = to_phys(W, small_grid)
        assert np.max(np.abs(w_direct - (su.pos - sv.pos))) <= 1e-8

    def test_stopping_switch_freezes_drift(self, small_params, small_integ, small_model, coupled_pair):
        y0, y0p = coupled_pair
        cfgs = [StoppingConfig(M_c=0.0, K_c=0.0, L_c=0.0, rho=1e-6, p=1.0)]
        run = run_coupled(y0, y0p, small_params, small_model, small_integ,
                          N=8, T=1.0, paths=2, sample_stride=5, stop_cfg=cfgs)
        assert np.all(np.isfinite(run.tau))  # fires immediately
        # drift freezes at the first sample after tau
        i_tau = np.searchsorted(run.t, np.max(run.tau)) + 1
        assert np.allclose(run.drift_cum[:, i_tau:], run.drift_cum[:, i_tau:i_tau + 1])

    def test_truncated_phase_envelope(self, small_params, small_integ, small_model, coupled_pair):
        # after the switch the accumulated functional stays within a fitted
        # multiple of its value at the stopping time
        y0, y0p = coupled_pair
        cfgs = [StoppingConfig(M_c=0.0, K_c=0.0, L_c=0.0, rho=1e-6, p=2.0)]
        run = run_coupled(y0, y0p, small_params, small_model, small_integ,
                          N=8, T=3.0, paths=2, sample_stride=5, stop_cfg=cfgs)
        for s in ("u", "up", "v"):
            F = run.series[s]["F_psi_p"]
            i_tau = int(np.searchsorted(run.t, np.nanmax(run.tau))) + 1
            c_fit = np.max(F[:, i_tau:] / F[:, i_tau:i_tau + 1])
            assert np.isfinite(c_fit)
            assert c_fit < 10.0

    def test_rejects_bad_rank(self, small_params, small_integ, small_model, coupled_pair):
        y0, y0p = coupled_pair
        with pytest.raises(ValueError):
            run_coupled(y0, y0p, small_params, small_model, small_integ,
                        N=small_model.K + 1, T=0.5)


class TestDetectors:
    def test_unreachable_threshold(self):
        t = np.linspace(0, 10, 101)
        F = np.ones((3, 101))
        cfg = StoppingConfig(M_c=1.0, K_c=1.0, L_c=0.0, rho=1e12)
        tau = detect_stopping(t, F, np.ones(3), cfg)
        assert np.all(np.isnan(tau))

    def test_zero_envelope_fires_immediately(self):
        t = np.linspace(0, 10, 101)
        F = np.ones((2, 101))
        cfg = StoppingConfig(M_c=0.0, K_c=0.0, L_c=0.0, rho=0.0)
        tau = detect_stopping(t, F, np.ones(2), cfg)
        assert np.all(tau == 0.0)

    def test_separation_detector(self):
        t = np.linspace(0, 10, 101)
        w_sq = np.tile((0.05 * (t + 1.0) ** -1.0) ** 2, (1, 1))
        # crossing when 0.05 (t+1)^-1 >= c (t+1)^-2, i.e. t+1 >= c/0.05
        theta = detect_separation(t, w_sq, c_sigma=0.2, p_sigma=2.0)
        assert theta[0] == pytest.approx(3.0, abs=0.1)

    def test_calibration_respects_cap(self, rng):
        t = np.linspace(0, 10, 201)
        paths = 60
        F = 0.5 * t[None, :] + np.cumsum(rng.standard_normal((paths, 201)) * 0.05, axis=1)
        E0 = np.full(paths, 1.0)
        cfg = calibrate_stopping(t, F, E0, p=1.0, beta0=0.01, rho_ref=5.0)
        env = cfg.M_c * E0[:, None] + cfg.K_c * t[None, :] + cfg.rho
        freq = np.mean((F >= env).any(axis=1))
        assert freq <= np.exp(-0.01 * 5.0)
        assert cfg.p == 1.0


class TestGirsanov:
    def test_equal_fields_no_drift(self, small_model, small_grid, rng):
        u = rng.standard_normal(small_grid.n)
        drift, sq = girsanov_drift_step(u, u, small_model, 8, True, 0.5)
        assert np.all(drift == 0.0) and sq == 0.0

    def test_inactive_flag(self, small_model, small_grid, rng):
        u = rng.standard_normal(small_grid.n)
        v = rng.standard_normal(small_grid.n)
        drift, sq = girsanov_drift_step(u, v, small_model, 8, False, 0.5)
        assert np.all(drift == 0.0) and sq == 0.0

    def test_drift_in_span(self, small_model, small_grid, rng):
        u = to_phys(rng.standard_normal(small_grid.n) * np.arange(1, small_grid.n + 1) ** -2.0, small_grid)
        v = u + 0.1 * to_phys(np.eye(small_grid.n)[1], small_grid)
        N = 8
        drift, sq = girsanov_drift_step(u, v, small_model, N, True, 0.5)
        assert sq > 0.0
        assert np.max(np.abs(project_Q_N(drift, small_model, N))) <= 1e-12

    def test_surrogate_shape(self):
        assert tv_surrogate(0.0, 1.0) == 0.0
        vals = [tv_surrogate(x, 1.0) for x in (1e-4, 1e-3, 1e-2)]
        assert vals[0] < vals[1] < vals[2]
        assert tv_surrogate(1e6, 1.0) == 1.0
        with pytest.raises(ValueError):
            tv_surrogate(1.0, 0.0)


class TestContractionFit:
    def test_trivial_when_never_separated(self, small_params, small_integ, small_model, small_grid, rng):
        y0 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        run = run_coupled(y0, y0, small_params, small_model, small_integ,
                          N=8, T=1.0, paths=2, sample_stride=5)
        rep = foias_prodi_check(run, "part1", small_params)
        assert rep["violations"] == 0
        assert rep["paths_used"] == 0  # all pairs below the floor

    def test_linear_twin_decay_needs_no_budget(self, small_params, small_grid, rng):
        # two free linear decays: the gap contracts at least at rate alpha
        # with zero integral budget (the fitted constant is zero)
        from wavemix.dynamics import RecordOptions, run_trajectory
        from wavemix.grid import eigenvalues

        integ = Integrator(small_grid, small_params.gamma, 2e-3)
        y1 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        y2 = make_random_state(small_grid, rng, 1.2, small_params.alpha)
        opts = RecordOptions(sample_stride=25, martingales=False)
        r1 = run_trajectory(y1, small_params, None, integ, T=5.0, kind="linear", options=opts)
        r2 = run_trajectory(y2, small_params, None, integ, T=5.0, kind="linear", options=opts)
        lam = eigenvalues(small_grid)
        # reconstruct the H-norm gap series from the recorded runs
        # (linear runs share no noise, but both are deterministic here)
        U1, V1 = r1.final_modes
        w_sq = []
        # recompute by stepping the difference directly: linearity makes the
        # difference itself a linear solution, so its energy series is enough
        yd = State(y1.pos - y2.pos, y1.vel - y2.vel)
        rd = run_trajectory(yd, small_params, None, integ, T=5.0, kind="linear", options=opts)
        w_sq = rd.xi_H_sq[0]
        grow = np.log(w_sq[1:]) - np.log(w_sq[0]) + small_params.alpha * rd.t[1:]
        assert np.all(grow <= 1e-8)

    def test_part2_reports_inputs(self, small_params, small_integ, small_model, coupled_pair):
        y0, y0p = coupled_pair
        run = run_coupled(y0, y0p, small_params, small_model, small_integ,
                          N=8, T=2.0, paths=2, sample_stride=5)
        rep = foias_prodi_check(run, "part2", small_params, eps=0.5, T0=0.5)
        assert rep["eps"] == 0.5 and rep["T0"] == 0.5
        assert rep["violations"] == 0
        with pytest.raises(ValueError):
            foias_prodi_check(run, "part3", small_params)
