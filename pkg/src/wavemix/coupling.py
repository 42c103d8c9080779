"""Coupled-pair machinery: synchronised auxiliary dynamics, pathwise
contraction checks, stopping times, and drift likelihood diagnostics.

A coupled run advances three systems on identical noise increments: the
primal pair (u from y, u' from y') and the auxiliary v started from y' but
driven by u through the rank-N projection correction P_N(f(u) - f(v)).
The difference u - v then contracts pathwise at a rate the contraction
report fits. Each system carries the weighted accumulated functionals;
once any of the three crosses its linear envelope (the stopping time tau),
all three switch to the free decay dynamics and the measure-change drift
-P_N(f(u) - f(v)) is frozen. The accumulated squared drift feeds a
total-variation surrogate through the Girsanov-type exponential bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec, State, Weights, h1_sq, to_modes, to_phys
from .noise import NoiseModel, increment_block
from .dynamics import Integrator, PhysParams, BlowUpError, nonlinearity, RecordOptions
from .functionals import SeriesAccumulator
from .grid import eigenvalues

__all__ = [
    "StoppingConfig",
    "CoupledRecord",
    "run_coupled",
    "foias_prodi_check",
    "detect_stopping",
    "detect_separation",
    "girsanov_drift_step",
    "tv_surrogate",
    "calibrate_stopping",
]


@dataclass
class StoppingConfig:
    """Envelope constants of the stopping rule F_psi_p(t) >= M E^p(0) + (K+L)t + rho."""

    M_c: float
    K_c: float
    L_c: float
    rho: float
    p: float = 2.0

    def __post_init__(self):
        if min(self.M_c, self.K_c, self.L_c, self.rho) < 0:
            raise ValueError("stopping constants must be nonnegative")
        if self.p < 1:
            raise ValueError(f"stopping exponent p={self.p} must be >= 1")


@dataclass
class CoupledRecord:
    """Sampled series of one coupled ensemble (arrays are (paths, samples))."""

    t: np.ndarray
    w_uv_sq: np.ndarray
    w_uup_sq: np.ndarray
    series: dict
    drift_cum: np.ndarray
    tau: np.ndarray
    tau_by_system: dict
    theta: np.ndarray
    sigma: np.ndarray
    increment_checksums: dict
    E0: dict
    N: int
    meta: dict = field(default_factory=dict)
    final_modes: dict = field(default_factory=dict)

    @property
    def paths(self) -> int:
        return self.w_uv_sq.shape[0]


def _first_crossing(t: np.ndarray, flags: np.ndarray) -> np.ndarray:
    """Per-path first sample time where flags is True, else nan."""
    any_hit = flags.any(axis=1)
    idx = np.argmax(flags, axis=1)
    out = np.where(any_hit, t[idx], np.nan)
    return out


def detect_stopping(
    t: np.ndarray, F: np.ndarray, E0, cfg: StoppingConfig, p: float | None = None
) -> np.ndarray:
    """First time the accumulated functional crosses its linear envelope.

    F is (paths, samples) of F_psi_p values on the grid t; E0 the starting
    energy (scalar or per path). Returns nan where no crossing occurs.
    """
    p = cfg.p if p is None else p
    E0 = np.asarray(E0, dtype=float).reshape(-1, 1)
    envelope = cfg.M_c * E0**p + (cfg.K_c + cfg.L_c) * t[None, :] + cfg.rho
    return _first_crossing(t, np.atleast_2d(F) >= envelope)


def detect_separation(
    t: np.ndarray, w_sq: np.ndarray, c_sigma: float = 1.0, p_sigma: float = 2.0
) -> np.ndarray:
    """First time |xi_u - xi_u'| leaves the algebraic envelope C (t+1)^-p."""
    thresh = c_sigma * (t[None, :] + 1.0) ** (-p_sigma)
    return _first_crossing(t, np.sqrt(np.atleast_2d(w_sq)) >= thresh)


def girsanov_drift_step(
    u_hat: np.ndarray, v_hat: np.ndarray, model: NoiseModel, N: int, active: bool, m: float
) -> tuple[np.ndarray, float]:
    """Measure-change drift -P_N(f(u) - f(v)) and its squared norm.

    Zero once the stopping time has fired (active=False), whatever the
    fields are.
    """
    grid = model.grid
    if not active:
        return np.zeros(grid.n), 0.0
    diff = nonlinearity(u_hat, m) - nonlinearity(v_hat, m)
    modes = to_modes(diff, grid)
    modes[..., N:] = 0.0
    return -to_phys(modes, grid), float(np.sum(modes * modes))


def tv_surrogate(cumulative_drift: float, b_min: float) -> float:
    """Pathwise plug-in of the measure-distance bound, clamped to one.

    Returns (1/2) sqrt(exp(6 b_min^-2 I) - 1) for I the accumulated squared
    drift; values at or beyond one mean the bound is uninformative on this
    path.
    """
    if cumulative_drift < 0:
        raise ValueError("cumulative drift integral cannot be negative")
    if b_min <= 0:
        raise ValueError("b_min must be positive: every synchronised mode needs forcing")
    expo = 6.0 * cumulative_drift / b_min**2
    if expo >= np.log(5.0):  # (1/2) sqrt(e^x - 1) >= 1 from here on
        return 1.0
    return float(0.5 * np.sqrt(np.expm1(expo)))


def run_coupled(
    y0: State,
    y0_prime: State,
    params: PhysParams,
    model: NoiseModel,
    integ: Integrator,
    N: int,
    T: float,
    stop_cfg: StoppingConfig | list | tuple | None = None,
    paths: int = 1,
    sample_stride: int = 5,
    c_sigma: float = 1.0,
    p_sigma: float = 2.0,
    start_step: int = 0,
) -> CoupledRecord:
    """Advance the coupled triple (u, u', v) on shared noise increments.

    All three systems consume identical increments each step. Stopping
    detectors run on the sample grid; `stop_cfg` is one StoppingConfig or a
    list of them, each applying to the accumulated functional of its own
    exponent p (the composite rule takes the minimum over detectors and
    systems). When a path's composite stopping time fires, that path's
    three systems switch to the free decay dynamics and its drift
    accumulation freezes. With stop_cfg None the detectors are disabled and
    the coupling runs undisturbed to T.
    """
    grid = integ.grid
    if not 0 <= N <= model.K:
        raise ValueError(f"projection rank N={N} must lie in [0, K={model.K}]")
    if stop_cfg is None:
        stop_cfgs: list[StoppingConfig] = []
    elif isinstance(stop_cfg, StoppingConfig):
        stop_cfgs = [stop_cfg]
    else:
        stop_cfgs = list(stop_cfg)
    for cfg in stop_cfgs:
        if cfg.p not in (1.0, 2.0):
            raise ValueError("coupled stopping detectors support p in {1, 2}")
    steps = integ.steps_for(T)
    if steps == 0:
        raise ValueError("coupled runs need T > 0")
    stride = max(1, int(sample_stride))
    dt = integ.dt
    B = paths
    alpha, m = params.alpha, params.m
    lam = eigenvalues(grid)
    weights = Weights(grid)
    h_modes = to_modes(params.h, grid)
    K = model.K

    names = ("u", "up", "v")
    U = {
        "u": np.tile(to_modes(y0.pos, grid), (B, 1)),
        "up": np.tile(to_modes(y0_prime.pos, grid), (B, 1)),
        "v": np.tile(to_modes(y0_prime.pos, grid), (B, 1)),
    }
    V = {
        "u": np.tile(to_modes(y0.vel, grid), (B, 1)),
        "up": np.tile(to_modes(y0_prime.vel, grid), (B, 1)),
        "v": np.tile(to_modes(y0_prime.vel, grid), (B, 1)),
    }

    n_samples = steps // stride + 1
    opts = RecordOptions(
        sample_stride=stride, weighted=True, martingales=False, p_exponent=2.0
    )
    acc = {s: SeriesAccumulator(B, n_samples, opts, grid, params, weights, lam) for s in names}
    w_uv_sq = np.zeros((B, n_samples))
    w_uup_sq = np.zeros((B, n_samples))
    drift_cum_run = np.zeros(B)
    drift_cum = np.zeros((B, n_samples))
    checksums = {s: np.zeros(B) for s in names}
    active = np.ones(B, dtype=bool)
    tau = np.full(B, np.nan)
    tau_by_system = {s: np.full(B, np.nan) for s in names}

    def w_norms(s_idx):
        du = {s: U[s] for s in names}
        dv = {s: V_obs[s] for s in names}
        for tgt, a_, b_ in (("uv", "u", "v"), ("uup", "u", "up")):
            dU = du[a_] - du[b_]
            dQ = (dv[a_] + alpha * du[a_]) - (dv[b_] + alpha * du[b_])
            val = np.sum(lam * dU * dU, axis=-1) + np.sum(dQ * dQ, axis=-1)
            (w_uv_sq if tgt == "uv" else w_uup_sq)[:, s_idx] = val

    def forcing_all(u_phys):
        f_modes = {s: to_modes(nonlinearity(u_phys[s], m), grid) for s in names}
        corr = f_modes["u"] - f_modes["v"]
        corr[..., N:] = 0.0
        act = active[:, None]
        G = {
            "u": -f_modes["u"] + act * h_modes,
            "up": -f_modes["up"] + act * h_modes,
            "v": -f_modes["v"] + act * (h_modes - corr),
        }
        return G, corr

    u_phys = {s: to_phys(U[s], grid) for s in names}
    V_obs = V
    w_norms(0)
    for s in names:
        acc[s].take_sample(0, 0.0, U[s], V[s], V[s] + alpha * U[s], u_phys[s])
    E0 = {s: acc[s].E[:, 0].copy() for s in names}
    G, corr = forcing_all(u_phys)
    for s in names:
        V[s] = V[s] + 0.5 * dt * G[s]

    for j in range(steps):
        t_next = (j + 1) * dt
        for s in names:
            U[s], V[s] = integ.flow(U[s], V[s])
        u_phys = {s: to_phys(U[s], grid) for s in names}
        G, corr = forcing_all(u_phys)
        last = j == steps - 1
        wgt = 0.5 if last else 1.0
        for s in names:
            V[s] = V[s] + wgt * dt * G[s]
        # drift accumulates while the stopping time has not fired
        drift_cum_run += active * dt * np.sum(corr[:, :N] ** 2, axis=-1)
        C = increment_block(model, dt, start_step + j, B) * active[:, None]
        for s in names:
            V[s][:, :K] += C
            checksums[s] += np.sum(np.abs(C), axis=-1)
        if (j + 1) % stride == 0 or last:
            s_idx = (j + 1) // stride if not last else n_samples - 1
            half = 0.0 if last else 0.5 * dt
            V_obs = {s: V[s] - half * G[s] for s in names}
            for s in names:
                acc[s].take_sample(
                    s_idx, t_next, U[s], V_obs[s], V_obs[s] + alpha * U[s], u_phys[s]
                )
                if not np.all(np.isfinite(acc[s].E[:, s_idx])):
                    raise BlowUpError(j + 1, t_next, s)
            w_norms(s_idx)
            drift_cum[:, s_idx] = drift_cum_run
            if stop_cfgs and active.any():
                newly = np.zeros(B, dtype=bool)
                for s in names:
                    for cfg in stop_cfgs:
                        Fser = acc[s].F_psi if cfg.p == 1.0 else acc[s].F_psi_p
                        env = (
                            cfg.M_c * E0[s] ** cfg.p
                            + (cfg.K_c + cfg.L_c) * t_next
                            + cfg.rho
                        )
                        hit = active & (Fser[:, s_idx] >= env)
                        if hit.any():
                            tau_by_system[s] = np.where(
                                hit & np.isnan(tau_by_system[s]), t_next, tau_by_system[s]
                            )
                            newly |= hit
                if newly.any():
                    tau = np.where(newly & np.isnan(tau), t_next, tau)
                    active = active & ~newly
                    if not last:
                        G_new, _ = forcing_all(u_phys)
                        for s in names:
                            V[s] = V[s] + 0.5 * dt * (G_new[s] - G[s])
                        G = G_new

    theta = detect_separation(acc["u"].t, w_uup_sq, c_sigma, p_sigma)
    tau_tilde = np.fmin(tau_by_system["u"], tau_by_system["up"])
    sigma = np.fmin(tau_tilde, theta)
    series = {
        s: {
            "E": acc[s].E,
            "E_psi": acc[s].E_psi,
            "xi_H_sq": acc[s].xi_H_sq,
            "u_h1": acc[s].u_h1,
            "u_h1_psi": acc[s].u_h1_psi,
            "F_psi": acc[s].F_psi,
            "F_psi_p": acc[s].F_psi_p,
        }
        for s in names
    }
    return CoupledRecord(
        t=acc["u"].t,
        w_uv_sq=w_uv_sq,
        w_uup_sq=w_uup_sq,
        series=series,
        drift_cum=drift_cum,
        tau=tau,
        tau_by_system=tau_by_system,
        theta=theta,
        sigma=sigma,
        increment_checksums=checksums,
        E0=E0,
        N=N,
        meta={
            "dt": dt,
            "T": T,
            "stride": stride,
            "seed": model.seed,
            "gamma": params.gamma,
            "alpha": params.alpha,
            "stop_cfg": [vars(c).copy() for c in stop_cfgs],
            "c_sigma": c_sigma,
            "p_sigma": p_sigma,
        },
        final_modes={s: (U[s], V[s]) for s in names},
    )


def foias_prodi_check(
    run: CoupledRecord,
    variant: str,
    params: PhysParams,
    eps: float = 1.0,
    T0: float = 0.0,
    floor: float = 1e-26,
) -> dict:
    """Fit the smallest constant closing the pathwise contraction inequality.

    variant "part1" bounds log growth of |xi_u - xi_v|^2 + alpha (t-s) by
    C int (||u||_1^2 + ||v||_1^2); "part2" restricts to t >= T0 and uses
    eps times the four-norm integrand including the weighted gradients.
    The report flags a violation only when no finite constant works
    (positive log growth against a vanishing integral).
    """
    if run.t.size < 2:
        raise ValueError("coupled run too short for a contraction fit")
    if variant not in ("part1", "part2"):
        raise ValueError(f"unknown variant '{variant}'")
    t = run.t
    w = np.maximum(run.w_uv_sq, 0.0)
    ser = run.series
    if variant == "part1":
        integrand = ser["u"]["u_h1"] + ser["v"]["u_h1"]
        lo = 0
        scale = 1.0
    else:
        integrand = (
            ser["u"]["u_h1"]
            + ser["v"]["u_h1"]
            + ser["u"]["u_h1_psi"]
            + ser["v"]["u_h1_psi"]
        )
        lo = int(np.searchsorted(t, T0))
        scale = eps
    # prefix integrals on the sample grid
    I = np.concatenate(
        [np.zeros((w.shape[0], 1)), np.cumsum(0.5 * np.diff(t) * (integrand[:, 1:] + integrand[:, :-1]), axis=1)],
        axis=1,
    )
    per_path_C = np.full(w.shape[0], np.nan)
    violated = np.zeros(w.shape[0], dtype=bool)
    for pth in range(w.shape[0]):
        ok = w[pth] > floor
        idx = np.nonzero(ok)[0]
        idx = idx[idx >= lo]
        if idx.size < 2:
            continue
        if idx.size > 128:  # all-pairs fit on a decimated grid
            idx = idx[np.linspace(0, idx.size - 1, 128).astype(int)]
        lw = np.log(w[pth, idx]) + params.alpha * t[idx]
        Ii = I[pth, idx]
        num = lw[None, :] - lw[:, None]
        den = scale * (Ii[None, :] - Ii[:, None])
        upper = np.triu(np.ones_like(num, dtype=bool), k=1)
        grow = upper & (num > 0)
        if np.any(grow & (den <= 0)):
            violated[pth] = True
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(grow & (den > 0), num / den, 0.0)
        per_path_C[pth] = float(np.max(ratio))
    finite = per_path_C[np.isfinite(per_path_C)]
    return {
        "variant": variant,
        "eps": eps,
        "T0": T0,
        "per_path_C": per_path_C,
        "C": float(np.median(finite)) if finite.size else np.nan,
        "C_max": float(np.max(finite)) if finite.size else np.nan,
        "violations": int(np.sum(violated)),
        "paths_used": int(finite.size),
    }


def calibrate_stopping(
    t: np.ndarray,
    F: np.ndarray,
    E0: np.ndarray,
    p: float,
    beta0: float,
    rho_ref: float = 5.0,
    L_c: float = 0.0,
    quantile: float = 0.75,
) -> StoppingConfig:
    """Pilot-run estimate of the envelope constants for one exponent p.

    K is the `quantile` of the observed mean growth slopes of the
    accumulated functional F (each exponent needs its own calibration: the
    squared functional grows on a different scale); M starts at 2 and the
    pair is escalated along a small grid until the crossing frequency at
    rho_ref stays below exp(-beta0 rho_ref).
    """
    E0 = np.asarray(E0, dtype=float)
    cap = float(np.exp(-beta0 * rho_ref))
    slopes = (F[:, -1] - F[:, 0]) / max(t[-1], 1e-12)
    base = float(max(np.quantile(slopes, quantile), 0.0))
    for k_factor in (1.0, 1.5, 2.0, 4.0):
        for M_c in (2.0, 4.0, 8.0):
            K_c = base * k_factor
            env = M_c * E0[:, None] ** p + (K_c + L_c) * t[None, :] + rho_ref
            if float(np.mean((F >= env).any(axis=1))) <= cap:
                return StoppingConfig(M_c=M_c, K_c=K_c, L_c=L_c, rho=rho_ref, p=p)
    return StoppingConfig(M_c=8.0, K_c=4.0 * base, L_c=L_c, rho=rho_ref, p=p)
