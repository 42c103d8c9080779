import numpy as np
import pytest

from wavemix.grid import State
from wavemix.noise import NoiseModel, power_law_coeffs
from wavemix.dynamics import RecordOptions
from wavemix.mixing import (
    DualLipschitzDictionary,
    dual_lipschitz_distance,
    fit_polynomial_rate,
    irreducibility_probe,
    make_random_state,
    mean_energy_check,
    recurrence_stats,
    run_ensemble,
    state_norm_H,
    supermartingale_tail,
    wilson_interval,
)


class TestEnsemble:
    def test_zero_horizon_copies(self, small_params, small_integ, small_model, small_grid, rng):
        y0 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        ens = run_ensemble(y0, small_params, small_model, small_integ, 0.0, 2)
        finals = ens.rec.final_states(small_grid)
        for f in finals:
            assert np.allclose(f.pos, y0.pos, atol=1e-12)

    def test_path_results_independent_of_ensemble_size(
        self, small_params, small_integ, small_model, small_grid, rng
    ):
        y0 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        e2 = run_ensemble(y0, small_params, small_model, small_integ, 0.5, 2)
        e4 = run_ensemble(y0, small_params, small_model, small_integ, 0.5, 4)
        assert np.array_equal(e2.rec.E, e4.rec.E[:2])

    def test_aggregates_permutation_invariant(self, small_params, small_integ, small_model, small_grid, rng):
        y0 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        ens = run_ensemble(y0, small_params, small_model, small_integ, 0.5, 4)
        fwd = ens.rec.E.mean(axis=0)
        rev = ens.rec.E[::-1].mean(axis=0)
        assert np.allclose(fwd, rev, rtol=1e-13)

    def test_needs_two_paths(self, small_params, small_integ, small_model, small_grid):
        with pytest.raises(ValueError):
            run_ensemble(State(np.zeros(small_grid.n), np.zeros(small_grid.n)),
                         small_params, small_model, small_integ, 0.5, 1)


class TestMeanEnergy:
    def test_free_decay_with_zero_plateau(self, small_params, small_integ, small_grid, rng):
        starts = [make_random_state(small_grid, rng, 2.0, small_params.alpha) for _ in range(4)]
        ens = run_ensemble(starts, small_params, None, small_integ, 8.0, 4,
                           options=RecordOptions(sample_stride=20, martingales=False),
                           kind="truncated")
        rep = mean_energy_check(ens, small_params.alpha, window=(4.0, 8.0))
        assert rep["passes"] and rep["margin"] >= 0.0
        assert rep["warning"] is not None  # fewer than 50 paths

    def test_origin_start_boundedness(self, small_params, small_integ, small_model, small_grid):
        y0 = State(np.zeros(small_grid.n), np.zeros(small_grid.n))
        ens = run_ensemble(y0, small_params, small_model, small_integ, 8.0, 8,
                           options=RecordOptions(sample_stride=20, martingales=False))
        rep = mean_energy_check(ens, small_params.alpha, window=(4.0, 8.0))
        assert rep["passes"]


class TestWilson:
    def test_known_values(self):
        lo, hi = wilson_interval(0, 100)
        assert lo == 0.0 and hi < 0.05
        lo, hi = wilson_interval(50, 100)
        assert lo < 0.5 < hi

    def test_needs_trials(self):
        with pytest.raises(ValueError):
            wilson_interval(0, 0)


class TestTails:
    def test_rho_zero_trivial_and_nested(self, small_params, small_integ, small_model, small_grid, rng):
        y0 = make_random_state(small_grid, rng, 1.5, small_params.alpha)
        ens = run_ensemble(y0, small_params, small_model, small_integ, 3.0, 8,
                           options=RecordOptions(sample_stride=10, weighted=True))
        rep = supermartingale_tail(ens, "eq3", (0.0, 2.0, 5.0), small_params, small_model)
        freqs = [r["freq"] for r in rep["rows"]]
        assert rep["rows"][0]["bound"] == 1.0
        assert freqs == sorted(freqs, reverse=True)  # nested events

    def test_unknown_functional(self, small_params, small_integ, small_model, small_grid, rng):
        y0 = make_random_state(small_grid, rng, 1.0, small_params.alpha)
        ens = run_ensemble(y0, small_params, small_model, small_integ, 1.0, 2,
                           options=RecordOptions(sample_stride=10))
        with pytest.raises(ValueError):
            supermartingale_tail(ens, "eq99", (1.0,), small_params, small_model)


class TestDualLipschitz:
    def test_identical_and_bounded(self, small_grid, small_model, rng):
        d = DualLipschitzDictionary.build(small_grid, small_model, 32, rng, 0.125)
        states = [make_random_state(small_grid, rng, 1.0, 0.125) for _ in range(4)]
        vals = d.evaluate_states(states, 0.125)
        assert dual_lipschitz_distance(vals, vals) == 0.0
        other = d.evaluate_states(
            [make_random_state(small_grid, rng, 3.0, 0.125) for _ in range(4)], 0.125
        )
        assert 0.0 <= dual_lipschitz_distance(vals, other) <= 1.0

    def test_point_mass_oracle(self, small_grid, small_model, rng):
        d = DualLipschitzDictionary.build(small_grid, small_model, 16, rng, 0.125)
        a = make_random_state(small_grid, rng, 1.0, 0.125)
        b = make_random_state(small_grid, rng, 2.0, 0.125)
        va = d.evaluate_states([a], 0.125)
        vb = d.evaluate_states([b], 0.125)
        brute = max(abs(va[0, k] - vb[0, k]) for k in range(16))
        assert dual_lipschitz_distance(va, vb) == pytest.approx(brute, abs=1e-15)

    def test_pseudo_metric_axioms(self, rng):
        va = rng.uniform(-0.5, 0.5, (6, 20))
        vb = rng.uniform(-0.5, 0.5, (6, 20))
        vc = rng.uniform(-0.5, 0.5, (6, 20))
        dab = dual_lipschitz_distance(va, vb)
        assert dab == dual_lipschitz_distance(vb, va)
        assert dual_lipschitz_distance(va, vc) <= dab + dual_lipschitz_distance(vb, vc) + 1e-12

    def test_dictionary_growth_monotone(self, small_grid, small_model, rng):
        d = DualLipschitzDictionary.build(small_grid, small_model, 64, rng, 0.125)
        a = d.evaluate_states([make_random_state(small_grid, rng, 1.0, 0.125)], 0.125)
        b = d.evaluate_states([make_random_state(small_grid, rng, 2.0, 0.125)], 0.125)
        assert dual_lipschitz_distance(a[:, :16], b[:, :16]) <= dual_lipschitz_distance(a, b)

    def test_empty_dictionary(self):
        with pytest.raises(ValueError):
            dual_lipschitz_distance(np.zeros((2, 0)), np.zeros((2, 0)))


class TestRateFit:
    def test_exact_power_law(self):
        t = np.linspace(5, 50, 19)
        d = (t + 1.0) ** -2.0
        fit = fit_polynomial_rate(t, d)
        assert fit.slope == pytest.approx(-2.0, abs=0.01)

    def test_constant(self):
        t = np.linspace(5, 50, 19)
        fit = fit_polynomial_rate(t, np.full_like(t, 0.5))
        assert fit.slope == pytest.approx(0.0, abs=0.01)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            fit_polynomial_rate([6.0, 7.0], [0.1, 0.1])


class TestRecurrence:
    def _fake_coupled(self, t, norms_u, norms_up):
        from wavemix.coupling import CoupledRecord

        series = {
            "u": {"xi_H_sq": norms_u**2},
            "up": {"xi_H_sq": norms_up**2},
        }
        return CoupledRecord(
            t=t, w_uv_sq=np.zeros((norms_u.shape[0], t.size)),
            w_uup_sq=np.zeros((norms_u.shape[0], t.size)), series=series,
            drift_cum=np.zeros((norms_u.shape[0], t.size)),
            tau=np.full(norms_u.shape[0], np.nan),
            tau_by_system={}, theta=np.full(norms_u.shape[0], np.nan),
            sigma=np.full(norms_u.shape[0], np.nan),
            increment_checksums={}, E0={}, N=4,
        )

    def test_initially_inside(self):
        t = np.linspace(0, 5, 11)
        n_u = np.full((3, 11), 0.1)
        rec = recurrence_stats(self._fake_coupled(t, n_u, n_u), d_ball=0.5)
        assert np.all(rec["tau_ball"] == 0.0)
        assert rec["hit_fraction"] == 1.0

    def test_hitting_monotone_in_horizon(self):
        t = np.linspace(0, 10, 21)
        norms = np.tile(2.0 * np.exp(-0.3 * t), (4, 1))
        full = recurrence_stats(self._fake_coupled(t, norms, norms), d_ball=0.5)
        short = recurrence_stats(
            self._fake_coupled(t[:8], norms[:, :8], norms[:, :8]), d_ball=0.5
        )
        assert full["hit_fraction"] >= short["hit_fraction"]

    def test_moment_ordering(self):
        t = np.linspace(0, 10, 21)
        rngl = np.random.default_rng(4)
        taus = rngl.uniform(1.0, 6.0, 16)
        norms = np.array([np.where(t >= tau, 0.1, 2.0) for tau in taus])
        rec = recurrence_stats(self._fake_coupled(t, norms, norms), d_ball=0.5)
        assert rec["moments_truncated"][2.0] >= rec["moments_truncated"][1.0] ** 2 - 1e-9


class TestIrreducibilityProbe:
    def test_bad_radii(self, small_params, small_model, small_integ):
        with pytest.raises(ValueError):
            irreducibility_probe(0.5, 0.5, small_params, small_model, small_integ,
                                 np.random.default_rng(0))

    def test_vanishing_noise_hits_certainly(self, small_params, small_integ, small_grid):
        tiny = NoiseModel(small_grid, power_law_coeffs(1e-9, 3.5, 8), n_forced=4, seed=3)
        rep = irreducibility_probe(2.0, 0.5, small_params, tiny, small_integ,
                                   np.random.default_rng(1), paths=6, probe_states=3,
                                   T_max=60.0, T_step=2.0)
        assert rep["p0_hat"] == 1.0


class TestRandomStates:
    def test_norm_exact(self, small_grid, rng):
        y = make_random_state(small_grid, rng, 3.7, 0.125)
        assert state_norm_H(y, small_grid, 0.125) == pytest.approx(3.7, rel=1e-10)
