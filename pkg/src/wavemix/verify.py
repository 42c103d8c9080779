"""Machine-checkable invariant suite behind the `verify` subcommand.

Each check returns a record {check, passed, value, tol, detail}; the CLI
serialises them to NDJSON and exits nonzero if any fails. The suite is the
fast, deterministic counterpart of the statistical acceptance experiments:
identities, operator properties, reproducibility, and small traced runs.
"""

from __future__ import annotations

import numpy as np

from .grid import (
    GridSpec,
    State,
    Weights,
    apply_A,
    h1_sq,
    inner,
    to_phys,
)
from .noise import (
    increment_block,
    project_P_N,
    project_Q_N,
    qn_cutoff_ratio,
    sample_increment,
)
from .dynamics import (
    Integrator,
    RecordOptions,
    quadratic_form_margin,
    run_trajectory,
    step_auxiliary,
    step_primal,
)
from .functionals import (
    MartingaleTracker,
    energy_identity_residual,
    snapshot,
    update_martingale,
)
from .coupling import tv_surrogate

__all__ = ["run_verification"]


def _rec(check, passed, value, tol, detail=""):
    return {
        "check": check,
        "passed": bool(passed),
        "value": float(value) if np.isscalar(value) or isinstance(value, float) else value,
        "tol": tol,
        "detail": detail or f"value={value:.3g} tol={tol:g}",
    }


def run_verification(manifest) -> list[dict]:
    grid = manifest.build_grid()
    params = manifest.build_params(grid)
    model = manifest.build_model(grid)
    integ = manifest.build_integrator(grid)
    weights = Weights(grid)
    rng = np.random.default_rng(1234)
    out = []

    # summation-by-parts: ||g||_1^2 equals (g, A g)
    g = rng.standard_normal(grid.n)
    dev = abs(h1_sq(g, grid) - inner(g, apply_A(g, grid), grid)) / h1_sq(g, grid)
    out.append(_rec("sbp_identity", dev <= 1e-10, dev, 1e-10))

    # eigenvector residuals of the stencil operator
    from .grid import eigenvalues

    lam = eigenvalues(grid)
    worst = 0.0
    for k in (0, 1, 7, 63, grid.n - 1):
        e_k = to_phys(np.eye(grid.n)[k], grid)
        res = np.max(np.abs(apply_A(e_k, grid) - lam[k] * e_k)) / lam[k]
        worst = max(worst, res)
    out.append(_rec("eigen_residual", worst <= 1e-10, worst, 1e-10))

    gram = grid.dx * (model.basis @ model.basis.T) - np.eye(model.K)
    dev = float(np.max(np.abs(gram)))
    out.append(_rec("basis_orthonormal", dev <= 1e-10, dev, 1e-10))

    # weight properties: 0 <= psi < phi, psi(0)=0, psi_t in (0,1], bounded slopes
    ok = np.all(weights.psi(0.0) == 0.0)
    worst_slope = 0.0
    for t in (0.1, 1.0, 10.0, 100.0):
        psi = weights.psi(t)
        ok &= np.all(psi > 0.0) and np.all(psi <= weights.phi)
        if t <= 10.0:  # at large t/phi the gap saturates below double precision
            ok &= np.all(psi < weights.phi)
        pt = weights.psi_t(t)
        ok &= np.all(pt > 0.0) and np.all(pt <= 1.0)
        worst_slope = max(worst_slope, np.max(np.abs(pt)), np.max(np.abs(weights.psi_x(t))))
    ok &= worst_slope < 2.0
    out.append(_rec("weight_psi_properties", ok, worst_slope, 2.0))

    # projections: idempotent, self-adjoint, norm split
    f1 = to_phys(rng.standard_normal(grid.n) * np.arange(1, grid.n + 1) ** -1.5, grid)
    f2 = to_phys(rng.standard_normal(grid.n) * np.arange(1, grid.n + 1) ** -1.5, grid)
    N = 32
    p1 = project_P_N(f1, model, N)
    dev = max(
        float(np.max(np.abs(project_P_N(p1, model, N) - p1))),
        abs(inner(p1, f2, grid) - inner(f1, project_P_N(f2, model, N), grid)),
        abs(
            inner(p1, p1, grid)
            + inner(project_Q_N(f1, model, N), project_Q_N(f1, model, N), grid)
            - inner(f1, f1, grid)
        ),
    )
    out.append(_rec("projection_identities", dev <= 1e-10, dev, 1e-10))

    margin = quadratic_form_margin(params, grid, rng)
    out.append(_rec("dissipation_quadratic_form", margin >= 0.0, margin, 0.0,
                    f"worst slack {margin:.4f} (must be >= 0)"))

    sums = model.sums()
    tails = model.tail_fractions()
    finite = all(np.isfinite(v) for v in sums.values())
    out.append(
        _rec(
            "coefficient_sums",
            finite and max(tails.values()) <= 0.10,
            max(tails.values()),
            0.10,
            f"B1={sums['B1']:.4g} B2={sums['B2']:.4g} B3={sums['B3']:.4g} "
            f"max tail fraction {max(tails.values()):.3g}",
        )
    )

    a = increment_block(model, integ.dt, step=3, paths=4)
    b = increment_block(model, integ.dt, step=3, paths=7)[:4]
    c = increment_block(model, integ.dt, step=4, paths=4)
    ok = np.array_equal(a, b) and not np.allclose(a, c)
    out.append(_rec("increment_reproducibility", ok, 0.0 if ok else 1.0, 0.0,
                    "rows depend only on (seed, path, step)"))

    # synchronised system with v = u is an exact fixed point
    u0 = to_phys(np.concatenate([rng.standard_normal(8) * 0.3, np.zeros(grid.n - 8)]), grid)
    su = State(u0.copy(), np.zeros(grid.n))
    sv = State(u0.copy(), np.zeros(grid.n))
    for j in range(30):
        inc = sample_increment(model, integ.dt, step=j)
        su2 = step_primal(su, params, inc, integ)
        sv = step_auxiliary(sv, su, params, inc, integ, N=64)
        su = su2
    dev = max(np.max(np.abs(su.pos - sv.pos)), np.max(np.abs(su.vel - sv.vel)))
    out.append(_rec("coupled_fixed_point", dev == 0.0, dev, 0.0, "bitwise"))

    # undamped single-mode energy conservation of the exact flow
    integ0 = Integrator(grid, gamma=0.0, dt=integ.dt)
    k = 4
    rec = run_trajectory(
        State(to_phys(np.eye(grid.n)[k], grid), np.zeros(grid.n)),
        params, None, integ0, T=2000 * integ.dt, kind="linear",
        options=RecordOptions(sample_stride=2000, martingales=False),
    )
    U, V = rec.final_modes
    drift = abs(lam[k] * U[0, k] ** 2 + V[0, k] ** 2 - lam[k]) / lam[k]
    out.append(_rec("linear_mode_energy", drift <= 1e-10, drift, 1e-10))

    # traced energy balance, realized correction
    y0 = State(u0.copy(), 0.1 * u0.copy())
    rec = run_trajectory(
        y0, params, model, integ, T=200 * integ.dt,
        options=RecordOptions(sample_stride=1, identity=True, weighted=True,
                              weighted_martingales=True),
    )
    res = energy_identity_residual(rec.identity, "realized")
    ok = res["max_residual_rel"] <= 1e-6 and res["max_residual_psi_rel"] <= 1e-6
    out.append(_rec("energy_balance_residual", ok,
                    max(res["max_residual_rel"], res["max_residual_psi_rel"]), 1e-6))

    # one-step increment variance against the quadratic variation
    st = State(u0.copy(), 0.3 * u0.copy())
    q = st.vel + params.alpha * st.pos
    from .grid import to_modes

    qk = to_modes(q, grid)[: model.K]
    blocks = increment_block(model, integ.dt, step=11, paths=1000)
    m_incs = 2.0 * blocks @ qk
    qv_inc = 4.0 * integ.dt * float(np.sum(model.b**2 * qk**2))
    rel = abs(np.var(m_incs) / qv_inc - 1.0)
    out.append(_rec("ito_isometry", rel <= 0.10, rel, 0.10))

    # independent quadratic-variation recomputation (two code paths)
    tracker = MartingaleTracker()
    st2 = st.copy()
    run_qv = 0.0
    for j in range(25):
        det = step_primal(st2, params, None, integ)
        inc = sample_increment(model, integ.dt, step=j)
        tracker = update_martingale(tracker, det, inc, params, weights, grid, model, (j + 1) * integ.dt)
        qk = to_modes(det.vel + params.alpha * det.pos, grid)[: model.K]
        run_qv += 4.0 * integ.dt * float(np.sum(model.b**2 * qk**2))
        det.vel = det.vel + inc.field(model)
        st2 = det
    rel = abs(tracker.QV / run_qv - 1.0)
    out.append(_rec("qv_two_path_agreement", rel <= 1e-10, rel, 1e-10))

    # high-mode cutoff ratio decays in N
    r32 = qn_cutoff_ratio(grid, 32, grid.half_width / 2, 1.0, 20, np.random.default_rng(5))
    r128 = qn_cutoff_ratio(grid, 128, grid.half_width / 2, 1.0, 20, np.random.default_rng(5))
    out.append(_rec("cutoff_ratio_monotone", r128 < r32, r128 / max(r32, 1e-300), 1.0,
                    f"ratio(128)={r128:.3g} < ratio(32)={r32:.3g}"))

    # surrogate bound: zero at zero, monotone, clamped at one
    vals = [tv_surrogate(v, 1.0) for v in (0.0, 1e-3, 1e-2, 1e3)]
    ok = vals[0] == 0.0 and all(x < y or y == 1.0 for x, y in zip(vals, vals[1:])) and vals[-1] == 1.0
    out.append(_rec("tv_surrogate_shape", ok, vals[1], 1.0))

    # weighted functionals collapse to plain ones at t = 0
    snap = snapshot(y0, 0.0, params, weights, grid)
    dev = abs(snap.E_psi - snap.E) + abs(snap.xi_psi_sq)
    out.append(_rec("weight_vanishes_initially", dev == 0.0, dev, 0.0))

    return out
