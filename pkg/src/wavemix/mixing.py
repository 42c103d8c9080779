"""Ensemble diagnostics: energy bounds, exponential tail checks, empirical
dual-Lipschitz distances, polynomial rate fits, recurrence statistics, and
the small-ball irreducibility probe.

Probabilistic acceptance always goes through Wilson 95% intervals; point
frequencies alone never gate a check. The dual-Lipschitz estimator
maximises over a fixed randomized dictionary of bounded Lipschitz test
functionals and is therefore a lower bound of the true metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec, State, Weights, eigenvalues, to_modes, to_phys
from .noise import NoiseModel
from .dynamics import (
    Integrator,
    PhysParams,
    RecordOptions,
    TrajectoryRecord,
    run_trajectory,
)

__all__ = [
    "EnsembleRecord",
    "run_ensemble",
    "make_random_state",
    "state_norm_H",
    "mean_energy_check",
    "wilson_interval",
    "supermartingale_tail",
    "DualLipschitzDictionary",
    "dual_lipschitz_distance",
    "RateFit",
    "fit_polynomial_rate",
    "recurrence_stats",
    "irreducibility_probe",
]


def state_norm_H(state: State, grid: GridSpec, alpha: float) -> float:
    """Phase-space norm |y|_H = (||u||_1^2 + ||u_dot + alpha u||^2)^(1/2)."""
    from .grid import h1_sq, inner

    q = state.vel + alpha * state.pos
    return float(np.sqrt(h1_sq(state.pos, grid) + inner(q, q, grid)))


def make_random_state(
    grid: GridSpec,
    rng: np.random.Generator,
    norm_H: float,
    alpha: float,
    k_max: int = 12,
    decay: float = 1.0,
) -> State:
    """Random smooth state with the prescribed phase-space norm.

    Position and momentum mode coefficients are Gaussian on the lowest
    k_max modes with a power-law profile, then rescaled exactly.
    """
    lam = eigenvalues(grid)
    u_modes = np.zeros(grid.n)
    q_modes = np.zeros(grid.n)
    prof = np.arange(1, k_max + 1, dtype=float) ** (-decay)
    u_modes[:k_max] = rng.standard_normal(k_max) * prof
    q_modes[:k_max] = rng.standard_normal(k_max) * prof
    norm = np.sqrt(np.sum(lam * u_modes**2) + np.sum(q_modes**2))
    if norm_H > 0 and norm == 0:
        raise ValueError("degenerate random draw")
    scale = norm_H / norm if norm > 0 else 0.0
    u_modes *= scale
    q_modes *= scale
    pos = to_phys(u_modes, grid)
    vel = to_phys(q_modes, grid) - alpha * pos
    return State(pos, vel)


@dataclass
class EnsembleRecord:
    """Record of an independent-path ensemble plus dictionary evaluations."""

    rec: TrajectoryRecord
    dl_values: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def paths(self) -> int:
        return self.rec.E.shape[0]

    @property
    def t(self) -> np.ndarray:
        return self.rec.t


def run_ensemble(
    initial: State | list[State],
    params: PhysParams,
    model: NoiseModel | None,
    integ: Integrator,
    T: float,
    paths: int,
    options: RecordOptions | None = None,
    dictionary: "DualLipschitzDictionary | None" = None,
    eval_times: tuple = (),
    kind: str = "primal",
) -> EnsembleRecord:
    """Run `paths` independent trajectories from a common or per-path start.

    Path p consumes the per-(seed, p, step) increment stream, so results do
    not depend on ensemble size or execution order; aggregation downstream
    is a deterministic fold over the path index.
    """
    if paths < 2:
        raise ValueError("an ensemble needs at least 2 paths")
    grid = integ.grid
    if isinstance(initial, State):
        pos = np.tile(initial.pos, (paths, 1))
        vel = np.tile(initial.vel, (paths, 1))
    else:
        if len(initial) != paths:
            raise ValueError(f"got {len(initial)} initial states for {paths} paths")
        pos = np.stack([s.pos for s in initial])
        vel = np.stack([s.vel for s in initial])
    dl_values: dict = {}
    observers = []
    if dictionary is not None and eval_times:
        targets = np.asarray(sorted(eval_times), dtype=float)

        def probe(view):
            hit = np.isclose(targets, view.t, atol=1e-9)
            if hit.any():
                dl_values[float(targets[hit][0])] = dictionary.evaluate(
                    view.U, view.V_obs, params.alpha
                )

        observers.append(probe)
    rec = run_trajectory(
        (pos, vel), params, model, integ, T, observers=observers, kind=kind, options=options
    )
    return EnsembleRecord(
        rec=rec,
        dl_values=dl_values,
        meta={"paths": paths, "T": T, "kind": kind, "seed": getattr(model, "seed", None)},
    )


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("need at least one trial")
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def mean_energy_check(
    ens: EnsembleRecord,
    alpha: float,
    window: tuple[float, float] = (15.0, 40.0),
    safety: float = 1.5,
) -> dict:
    """Check mean E(t) <= mean E(0) exp(-alpha t) + C with a calibrated C.

    C is `safety` times the plateau (the late-window mean); the report also
    measures plateau stability between the two window halves. Fewer than 50
    paths degrades statistical power and only warns.
    """
    t = ens.t
    mean_E = ens.rec.E.mean(axis=0)
    lo, hi = window
    sel = (t >= lo) & (t <= hi)
    if not sel.any():
        raise ValueError(f"window {window} not covered by samples up to t={t[-1]}")
    plateau = float(mean_E[sel].mean())
    mid = 0.5 * (lo + hi)
    first = float(mean_E[(t >= lo) & (t < mid)].mean())
    second = float(mean_E[(t >= mid) & (t <= hi)].mean())
    stability = abs(first - second) / plateau if plateau > 0 else np.inf
    c_hat = safety * plateau
    bound = mean_E[0] * np.exp(-alpha * t) + c_hat
    margin = float(np.min(bound - mean_E))
    return {
        "passes": bool(margin >= 0.0),
        "margin": margin,
        "plateau": plateau,
        "plateau_stability": stability,
        "C_hat": c_hat,
        "warning": "fewer than 50 paths: weak statistical power" if ens.paths < 50 else None,
    }


_TAIL_FORMS = ("eq3", "eq12", "eq6", "eq7")


def supermartingale_tail(
    ens: EnsembleRecord,
    functional: str,
    rho_list,
    params: PhysParams,
    model: NoiseModel,
    stop_constants: tuple[float, float] = (0.0, 0.0),
    t_off: float = 0.0,
    slack: float = 2.0,
) -> dict:
    """Exceedance frequencies of the exponential-envelope events.

    eq3/eq12 use the plain accumulated energy against the linear drift
    (||h||^2 + B1) t with bound exp(-beta rho); eq6/eq7 use the weighted
    functional against K t with bound 2 exp(-beta0 rho) and envelope offset
    M E(0). The Wilson 95% upper bound is compared to `slack` times the
    theoretical bound (finite horizon and time discretisation bias).
    """
    if functional not in _TAIL_FORMS:
        raise ValueError(f"functional must be one of {_TAIL_FORMS}")
    from .grid import inner

    t = ens.t
    i0 = int(np.searchsorted(t, t_off))
    sums = model.sums()
    alpha = params.alpha
    beta = alpha / (8.0 * sums["B1"])
    beta0 = min(beta, alpha / (8.0 * sums["B2"]))
    if functional in ("eq3", "eq12"):
        c_lin = inner(params.h, params.h, model.grid) + sums["B1"]
        F = ens.rec.F
        stat = np.max(
            F[:, i0:] - F[:, i0, None] - c_lin * (t[None, i0:] - t[i0]), axis=1
        )
        bound = lambda rho: np.exp(-beta * rho)
        used_beta = beta
    else:
        K_c, M_c = stop_constants
        F = ens.rec.F_psi
        if F is None:
            raise ValueError("weighted tails need a run with weighted recording")
        E0 = ens.rec.E[:, i0]
        stat = (
            np.max(F[:, i0:] - K_c * (t[None, i0:] - t[i0]), axis=1)
            - F[:, i0]
            - M_c * E0
        )
        bound = lambda rho: 2.0 * np.exp(-beta0 * rho)
        used_beta = beta0
    rows = []
    n = ens.paths
    for rho in rho_list:
        k = int(np.sum(stat >= rho))
        _, hi = wilson_interval(k, n)
        b = float(bound(rho))
        rows.append(
            {
                "rho": float(rho),
                "exceed": k,
                "freq": k / n,
                "wilson_upper": hi,
                "bound": b,
                "passes": bool(hi <= slack * b),
            }
        )
    return {
        "functional": functional,
        "beta": used_beta,
        "t_off": t_off,
        "rows": rows,
        "passes": all(r["passes"] for r in rows),
    }


@dataclass
class DualLipschitzDictionary:
    """Randomized test functionals F_k(y) = tanh(<y, g_k>_H + theta_k)/2.

    Directions are unit vectors in the phase-space norm, so each F_k is
    bounded by 1/2 with Lipschitz constant at most 1/2; the induced
    empirical distance lower-bounds the dual-Lipschitz metric.
    """

    grid: GridSpec
    u_modes: np.ndarray
    q_modes: np.ndarray
    offsets: np.ndarray

    @classmethod
    def build(
        cls,
        grid: GridSpec,
        model: NoiseModel,
        size: int,
        rng: np.random.Generator,
        alpha: float,
    ) -> "DualLipschitzDictionary":
        lam = eigenvalues(grid)
        K = model.K
        u = np.zeros((size, grid.n))
        q = np.zeros((size, grid.n))
        prof = np.abs(model.b) / np.max(np.abs(model.b))
        u[:, :K] = rng.standard_normal((size, K)) * prof
        q[:, :K] = rng.standard_normal((size, K)) * prof
        norm = np.sqrt(np.sum(lam * u * u, axis=1) + np.sum(q * q, axis=1))
        u /= norm[:, None]
        q /= norm[:, None]
        return cls(grid, u, q, rng.uniform(-1.0, 1.0, size))

    @property
    def size(self) -> int:
        return len(self.offsets)

    def evaluate(self, U: np.ndarray, V_obs: np.ndarray, alpha: float) -> np.ndarray:
        """Values F_k(y_p) for a batch of mode states, shape (paths, size)."""
        lam = eigenvalues(self.grid)
        qy = V_obs + alpha * U
        pair = (lam * U) @ self.u_modes.T + qy @ self.q_modes.T
        return 0.5 * np.tanh(pair + self.offsets[None, :])

    def evaluate_states(self, states: list[State], alpha: float) -> np.ndarray:
        U = to_modes(np.stack([s.pos for s in states]), self.grid)
        V = to_modes(np.stack([s.vel for s in states]), self.grid)
        return self.evaluate(U, V, alpha)


def dual_lipschitz_distance(values_a: np.ndarray, values_b: np.ndarray) -> float:
    """Sup over the dictionary of the difference of empirical means."""
    if values_a.shape[-1] != values_b.shape[-1]:
        raise ValueError("ensembles were evaluated on different dictionaries")
    if values_a.shape[-1] == 0:
        raise ValueError("empty dictionary")
    return float(
        np.max(np.abs(values_a.mean(axis=0) - values_b.mean(axis=0)))
    )


@dataclass
class RateFit:
    """Least-squares power-law fit of distance against shifted time."""

    times: np.ndarray
    distances: np.ndarray
    slope: float
    intercept: float
    r_squared: float
    used: np.ndarray

    @property
    def C(self) -> float:
        return float(np.exp(self.intercept))


def fit_polynomial_rate(
    times, distances, burn_in: float = 5.0, floor: float = 1e-4
) -> RateFit:
    """Fit log d = intercept + slope * log(t + 1) past the burn-in.

    Distances at or below the estimator noise floor are excluded; at least
    five usable sample times are required.
    """
    times = np.asarray(times, dtype=float)
    distances = np.asarray(distances, dtype=float)
    used = (times >= burn_in) & (distances > floor)
    if int(used.sum()) < 5:
        raise ValueError(
            f"need >= 5 usable samples past burn-in, got {int(used.sum())}"
        )
    x = np.log(times[used] + 1.0)
    y = np.log(distances[used])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(times, distances, float(slope), float(intercept), r2, used)


def recurrence_stats(
    coupled, d_ball: float, p_moments=(1.0, 2.0)
) -> dict:
    """First simultaneous entry of both primal components into the d-ball.

    Uses |y|_H <= d on the sample grid; paths that never hit by the horizon
    are censored: moments integrate the empirical survival function up to T
    and the censored tail is reported, never extrapolated. The weight
    g(r) = 1 + r^2 used in recurrence envelopes G = g(|y|) + g(|y'|) is
    recorded for reference.
    """
    t = coupled.t
    inside = (coupled.series["u"]["xi_H_sq"] <= d_ball**2) & (
        coupled.series["up"]["xi_H_sq"] <= d_ball**2
    )
    tau_b = _first_hit_time(t, inside)
    censored = np.isnan(tau_b)
    out_moments = {}
    for p in p_moments:
        # E tau^p = int p s^(p-1) S(s) ds, truncated at the horizon
        surv = np.array([np.mean(np.where(censored, np.inf, tau_b) > s) for s in t])
        integrand = p * np.maximum(t, 0.0) ** (p - 1.0) * surv
        out_moments[p] = float(np.trapezoid(integrand, t))
    return {
        "tau_ball": tau_b,
        "hit_fraction": float(np.mean(~censored)),
        "censored_fraction": float(np.mean(censored)),
        "moments_truncated": out_moments,
        "horizon": float(t[-1]),
        "g_weight": "g(r) = 1 + r^2",
    }


def _first_hit_time(t: np.ndarray, flags: np.ndarray) -> np.ndarray:
    any_hit = flags.any(axis=1)
    idx = np.argmax(flags, axis=1)
    return np.where(any_hit, t[idx], np.nan)


def irreducibility_probe(
    R: float,
    d: float,
    params: PhysParams,
    model: NoiseModel,
    integ: Integrator,
    rng: np.random.Generator,
    paths: int = 200,
    probe_states: int = 8,
    T_max: float = 200.0,
    T_step: float = 2.0,
) -> dict:
    """Small-ball hitting probability from the worst point of the R-ball.

    Stage one integrates the free decay (no forcing, no noise) from sampled
    norm-R states and finds the first horizon T at which all land inside
    the d/2-ball; stage two runs the noisy dynamics from the slowest lander
    and estimates the probability of |y(T)|_H < d with a Wilson interval.
    """
    if not R > d > 0:
        raise ValueError(f"need R > d > 0, got R={R}, d={d}")
    grid = integ.grid
    starts = [make_random_state(grid, rng, R, params.alpha) for _ in range(probe_states)]
    pos = np.stack([s.pos for s in starts])
    vel = np.stack([s.vel for s in starts])
    stride = max(1, int(round(T_step / integ.dt)))
    rec = run_trajectory(
        (pos, vel),
        params,
        None,
        integ,
        T_max,
        kind="truncated",
        options=RecordOptions(sample_stride=stride, martingales=False),
    )
    norms = np.sqrt(rec.xi_H_sq)
    landed = np.max(norms, axis=0) < d / 2.0
    if not landed.any():
        raise RuntimeError(
            f"free decay did not reach the d/2-ball within T_max={T_max}; "
            "check gamma and alpha"
        )
    i_T = int(np.argmax(landed))
    T_found = float(rec.t[i_T])
    if T_found == 0.0:
        T_found = float(rec.t[1]) if len(rec.t) > 1 else T_step
        i_T = min(1, len(rec.t) - 1)
    worst = int(np.argmax(norms[:, i_T]))
    steps = max(1, int(round(T_found / integ.dt)))
    T_run = steps * integ.dt
    noisy = run_trajectory(
        (np.tile(pos[worst], (paths, 1)), np.tile(vel[worst], (paths, 1))),
        params,
        model,
        integ,
        T_run,
        options=RecordOptions(sample_stride=steps, martingales=False),
    )
    final_norm = np.sqrt(noisy.xi_H_sq[:, -1])
    hits = int(np.sum(final_norm < d))
    lo, hi = wilson_interval(hits, paths)
    return {
        "T_found": T_found,
        "p0_hat": hits / paths,
        "wilson_lower": lo,
        "wilson_upper": hi,
        "hits": hits,
        "paths": paths,
        "worst_start_norm": float(norms[worst, 0]),
        "free_decay_norm_at_T": float(norms[worst, i_T]),
    }
