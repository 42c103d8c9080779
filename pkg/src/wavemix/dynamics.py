"""Time integrators for the damped nonlinear wave dynamics.

One Strang step is: half-kick of the velocity by the nonlinear forcing,
exact per-mode flow of the stiff linear part u_tt + A u + gamma u_t = 0
over dt, another half-kick, then the additive noise kick. The linear flow
is diagonal in the sine basis, so the integrator keeps batched states as
mode-coefficient arrays and touches physical space once per step (for the
power nonlinearity). Interior half-kicks of consecutive steps are merged;
they act on the velocity only and commute exactly with the noise kick, so
observed states at step boundaries match the unmerged scheme.

Four right-hand sides share the machinery: the stochastically forced
primal system, the synchronised auxiliary system (projection-corrected
nonlinearity, shared noise), the free decay system (no forcing, no noise),
and the controlled system driven by a supplied rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import GridSpec, State, Weights, eigenvalues, to_modes, to_phys
from .noise import NoiseIncrement, NoiseModel, increment_block

__all__ = [
    "PhysParams",
    "Integrator",
    "BlowUpError",
    "RecordOptions",
    "TrajectoryRecord",
    "default_alpha",
    "nonlinearity",
    "quadratic_form_margin",
    "step_primal",
    "step_auxiliary",
    "step_truncated",
    "step_controlled",
    "run_trajectory",
]


def default_alpha(gamma: float) -> float:
    """Damping-linked choice of the small norm parameter: min(gamma/4, 1/4)."""
    return min(gamma / 4.0, 0.25)


def nonlinearity(u: np.ndarray, m: float) -> np.ndarray:
    """Odd power |u|^(2m) u; sign-preserving for fractional exponents."""
    if not 0.0 < m < 1.0:
        raise ValueError(f"m must lie in (0,1), got {m}")
    if m == 0.5:
        return np.abs(u) * u
    return np.abs(u) ** (2.0 * m) * u


@dataclass
class PhysParams:
    """Physical constants: damping gamma, power exponent m, norm parameter
    alpha, and the deterministic forcing profile h."""

    gamma: float
    m: float
    alpha: float
    h: np.ndarray

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 < self.m < 1.0:
            raise ValueError(f"m must lie in (0,1), got {self.m}")
        if not 0.0 < self.alpha <= default_alpha(self.gamma) + 1e-12:
            raise ValueError(
                f"alpha={self.alpha} must lie in (0, min(gamma/4, 1/4)]"
                f" = (0, {default_alpha(self.gamma)}]"
            )
        self.h = np.asarray(self.h, dtype=float)


def quadratic_form_margin(
    params: PhysParams, grid: GridSpec, rng: np.random.Generator, trials: int = 64
) -> float:
    """Worst slack of the dissipation bound on random states.

    Checks that -2a||u||_1^2 + 2(a-g)||q||^2 - 2a(a-g)(u,q) stays below
    -(3/2) a (||u||_1^2 + ||q||^2); returns the minimum of
    (-form - 1.5*a*norm)/norm over the sample, which must be >= 0 for the
    configured alpha.
    """
    from .grid import h1_sq, inner

    a, g = params.alpha, params.gamma
    worst = np.inf
    for _ in range(trials):
        u = rng.standard_normal(grid.n) * rng.uniform(0.1, 10.0)
        q = rng.standard_normal(grid.n) * rng.uniform(0.1, 10.0)
        nu = h1_sq(u, grid)
        nq = inner(q, q, grid)
        form = -2 * a * nu + 2 * (a - g) * nq - 2 * a * (a - g) * inner(u, q, grid)
        worst = min(worst, (-form - 1.5 * a * (nu + nq)) / (nu + nq))
    return float(worst)


@dataclass
class Integrator:
    """Step size plus the exact 2x2 per-mode propagators of the linear flow.

    For mode k with stiffness lambda_k the flow of u_tt + lambda u + gamma
    u_t = 0 over dt is exp(-gamma dt/2) times a rotation/shear computed from
    omega = sqrt(lambda - gamma^2/4); evaluated with complex sqrt so under-
    and over-damped modes share one formula.
    """

    grid: GridSpec
    gamma: float
    dt: float
    scheme: str = "strang_spectral"
    a_uu: np.ndarray = field(init=False, repr=False)
    a_uv: np.ndarray = field(init=False, repr=False)
    a_vu: np.ndarray = field(init=False, repr=False)
    a_vv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        lam = eigenvalues(self.grid)
        om = np.sqrt(lam.astype(complex) - self.gamma**2 / 4.0)
        envelope = np.exp(-self.gamma * self.dt / 2.0)
        c = np.cos(om * self.dt)
        # sin(om dt)/om, finite as om -> 0
        with np.errstate(invalid="ignore"):
            sc = np.where(np.abs(om) > 1e-12, np.sin(om * self.dt) / om, self.dt)
        self.a_uu = (envelope * (c + 0.5 * self.gamma * sc)).real
        self.a_uv = (envelope * sc).real
        self.a_vu = (envelope * (-lam * sc)).real
        self.a_vv = (envelope * (c - 0.5 * self.gamma * sc)).real

    def steps_for(self, T: float) -> int:
        steps = int(round(T / self.dt))
        if abs(steps * self.dt - T) > 1e-9 * max(1.0, T):
            raise ValueError(f"horizon T={T} is not an integer multiple of dt={self.dt}")
        return steps

    def flow(self, U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Advance mode coefficient arrays by one exact linear step."""
        U2 = self.a_uu * U + self.a_uv * V
        V2 = self.a_vu * U + self.a_vv * V
        return U2, V2


class BlowUpError(RuntimeError):
    """State became non-finite; carries the step index and time."""

    def __init__(self, step: int, t: float, system: str = "primal"):
        super().__init__(
            f"non-finite state in {system} system at step {step} (t={t:.6g}); "
            "dt is likely too large for these parameters"
        )
        self.step = step
        self.t = t
        self.system = system


# --- recording ------------------------------------------------------------


@dataclass
class RecordOptions:
    """What the trajectory runner records at sample times."""

    sample_stride: int = 1
    weighted: bool = False
    martingales: bool = True
    weighted_martingales: bool = False
    identity: bool = False
    p_exponent: float = 2.0


@dataclass
class TrajectoryRecord:
    """Sampled functional series of one run (arrays are (paths, samples))."""

    t: np.ndarray
    E: np.ndarray
    xi_H_sq: np.ndarray
    u_h1: np.ndarray
    F: np.ndarray
    F_p: np.ndarray
    M: np.ndarray | None = None
    QV: np.ndarray | None = None
    xi_psi_sq: np.ndarray | None = None
    E_psi: np.ndarray | None = None
    u_h1_psi: np.ndarray | None = None
    F_psi: np.ndarray | None = None
    F_psi_p: np.ndarray | None = None
    M_psi: np.ndarray | None = None
    QV_psi: np.ndarray | None = None
    identity: dict | None = None
    final_modes: tuple[np.ndarray, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def final_states(self, grid: GridSpec) -> list[State]:
        U, V = self.final_modes
        pos = to_phys(U, grid)
        vel = to_phys(V, grid)
        return [State(pos[i], vel[i]) for i in range(pos.shape[0])]


class SampleView:
    """Read-only view handed to observers at sample times."""

    def __init__(self, grid, U, V_obs, u_phys, t, step):
        self.grid = grid
        self.U = U
        self.V_obs = V_obs
        self.u_phys = u_phys
        self.t = t
        self.step = step

    def vel_phys(self) -> np.ndarray:
        return to_phys(self.V_obs, self.grid)


# --- single-step operations ----------------------------------------------


def _forcing_modes_primal(u_phys, params, grid, h_modes):
    return -to_modes(nonlinearity(u_phys, params.m), grid) + h_modes


def _apply_noise(V, inc: NoiseIncrement | None):
    if inc is not None:
        V[..., : len(inc.per_mode)] += inc.per_mode
    return V


def _finite_or_raise(arrs, step, t, system):
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise BlowUpError(step, t, system)


def step_primal(
    state: State,
    params: PhysParams,
    noise_inc: NoiseIncrement | None,
    integ: Integrator,
) -> State:
    """One Strang step of the stochastically forced system."""
    grid = integ.grid
    grid.check_field(state.pos)
    if noise_inc is not None and abs(noise_inc.dt - integ.dt) > 1e-12:
        raise ValueError("noise increment dt does not match the integrator step")
    h_modes = to_modes(params.h, grid)
    U = to_modes(state.pos, grid)
    V = to_modes(state.vel, grid)
    V = V + 0.5 * integ.dt * _forcing_modes_primal(state.pos, params, grid, h_modes)
    U, V = integ.flow(U, V)
    u_star = to_phys(U, grid)
    V = V + 0.5 * integ.dt * _forcing_modes_primal(u_star, params, grid, h_modes)
    V = _apply_noise(V, noise_inc)
    out = State(u_star, to_phys(V, grid))
    _finite_or_raise([out.pos, out.vel], 0, integ.dt, "primal")
    return out


def step_auxiliary(
    state_v: State,
    driver: State,
    params: PhysParams,
    noise_inc: NoiseIncrement | None,
    integ: Integrator,
    N: int,
) -> State:
    """One step of the synchronised system driven by `driver`.

    The forcing is -f(v) - P_N(f(u) - f(v)) + h with the driver's position
    taken at the matching Strang stage (the driver's linear flow is replayed
    internally so both half-kicks stay stage-consistent). With v = u the
    correction vanishes identically and the step reduces to step_primal.
    """
    grid = integ.grid
    if N < 0 or N > grid.n:
        raise ValueError(f"projection rank N={N} out of range [0, {grid.n}]")
    h_modes = to_modes(params.h, grid)

    def forcing(v_phys, u_phys):
        fv = to_modes(nonlinearity(v_phys, params.m), grid)
        fu = to_modes(nonlinearity(u_phys, params.m), grid)
        corr = fu - fv
        corr[..., N:] = 0.0
        return -(fv + corr) + h_modes

    Uv = to_modes(state_v.pos, grid)
    Vv = to_modes(state_v.vel, grid)
    Ud = to_modes(driver.pos, grid)
    Vd = to_modes(driver.vel, grid) + 0.5 * integ.dt * _forcing_modes_primal(
        driver.pos, params, grid, h_modes
    )
    Vv = Vv + 0.5 * integ.dt * forcing(state_v.pos, driver.pos)
    Uv, Vv = integ.flow(Uv, Vv)
    Ud, Vd = integ.flow(Ud, Vd)
    v_star = to_phys(Uv, grid)
    u_star = to_phys(Ud, grid)
    Vv = Vv + 0.5 * integ.dt * forcing(v_star, u_star)
    Vv = _apply_noise(Vv, noise_inc)
    out = State(v_star, to_phys(Vv, grid))
    _finite_or_raise([out.pos, out.vel], 0, integ.dt, "auxiliary")
    return out


def step_truncated(state: State, params: PhysParams, integ: Integrator) -> State:
    """One deterministic step of the free decay system (no noise, no h)."""
    grid = integ.grid
    zero_h = np.zeros(grid.n)
    U = to_modes(state.pos, grid)
    V = to_modes(state.vel, grid)
    V = V + 0.5 * integ.dt * _forcing_modes_primal(state.pos, params, grid, zero_h)
    U, V = integ.flow(U, V)
    u_star = to_phys(U, grid)
    V = V + 0.5 * integ.dt * _forcing_modes_primal(u_star, params, grid, zero_h)
    out = State(u_star, to_phys(V, grid))
    _finite_or_raise([out.pos, out.vel], 0, integ.dt, "truncated")
    return out


def step_controlled(
    state: State, params: PhysParams, g_dot: np.ndarray, integ: Integrator
) -> State:
    """One step with the noise replaced by the control rate g_dot (h absorbed)."""
    grid = integ.grid
    g_modes = to_modes(grid.check_field(g_dot), grid)

    def forcing(u_phys):
        return -to_modes(nonlinearity(u_phys, params.m), grid) + g_modes

    U = to_modes(state.pos, grid)
    V = to_modes(state.vel, grid)
    V = V + 0.5 * integ.dt * forcing(state.pos)
    U, V = integ.flow(U, V)
    u_star = to_phys(U, grid)
    V = V + 0.5 * integ.dt * forcing(u_star)
    out = State(u_star, to_phys(V, grid))
    _finite_or_raise([out.pos, out.vel], 0, integ.dt, "controlled")
    return out


# --- trajectory runner ------------------------------------------------------


def _stack_initial(initial, grid) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(initial, State):
        initial = [initial]
    if isinstance(initial, (list, tuple)) and initial and isinstance(initial[0], State):
        pos = np.stack([s.pos for s in initial])
        vel = np.stack([s.vel for s in initial])
    else:
        pos, vel = initial
        pos = np.atleast_2d(np.asarray(pos, dtype=float))
        vel = np.atleast_2d(np.asarray(vel, dtype=float))
    grid.check_field(pos)
    return to_modes(pos, grid), to_modes(vel, grid)


def run_trajectory(
    initial,
    params: PhysParams,
    model: NoiseModel | None,
    integ: Integrator,
    T: float,
    observers: Sequence = (),
    kind: str = "primal",
    g_dot: Callable[[float], np.ndarray] | None = None,
    options: RecordOptions | None = None,
    weights: Weights | None = None,
    start_step: int = 0,
    checkpoint_every: int = 0,
    on_checkpoint: Callable[[dict], None] | None = None,
    resume_state: dict | None = None,
) -> TrajectoryRecord:
    """Advance one system from 0 to T, recording functional series.

    `initial` is a State, a list of States, or a (pos, vel) array pair for a
    batch of independent paths; with a noise model, path p consumes the
    per-(seed, p, step) increment stream. Observers are read-only callbacks
    invoked at sample times. T = 0 returns the initial data and empty series.

    Checkpoints capture the loop state verbatim (post-noise, pending merged
    half-kick included), so a resumed run replays the remaining steps
    bitwise; the noise stream is stateless per (seed, path, step). Resuming
    requires the same manifest; checkpointing is incompatible with the
    identity trace.
    """
    opts = options or RecordOptions()
    grid = integ.grid
    steps = integ.steps_for(T)
    if resume_state is not None:
        U = resume_state["U"].copy()
        V = resume_state["V"].copy()
    else:
        U, V = _stack_initial(initial, grid)
    B = U.shape[0]
    if checkpoint_every and opts.identity:
        raise ValueError("checkpointing is not supported together with the identity trace")
    if checkpoint_every and checkpoint_every % max(1, opts.sample_stride) != 0:
        raise ValueError("checkpoint_every must be a multiple of sample_stride")
    if kind not in ("primal", "truncated", "controlled", "linear"):
        raise ValueError(f"unknown system kind '{kind}'")
    if kind == "controlled" and g_dot is None:
        raise ValueError("controlled runs need a g_dot callable")
    noisy = model is not None and kind in ("primal", "linear")
    if weights is None and (opts.weighted or opts.identity):
        weights = Weights(grid)

    from . import functionals as fl

    dt, stride = integ.dt, max(1, int(opts.sample_stride))
    h_modes = to_modes(params.h, grid) if kind in ("primal", "linear") else np.zeros(grid.n)
    lam = eigenvalues(grid)
    alpha, m = params.alpha, params.m
    K = model.K if noisy else 0
    b = model.b if noisy else None

    def forcing_modes(u_phys):
        if kind == "linear":
            return np.broadcast_to(h_modes, u_phys.shape).copy()
        return -to_modes(nonlinearity(u_phys, m), grid) + h_modes

    def forcing_controlled(u_phys, t):
        return -to_modes(nonlinearity(u_phys, m), grid) + to_modes(g_dot(t), grid)

    # sample bookkeeping
    n_samples = steps // stride + 1 if steps > 0 else 0
    rec = fl.SeriesAccumulator(B, n_samples, opts, grid, params, weights, lam)
    ident = fl.IdentityTrace(B, steps, grid, params, weights, model) if opts.identity else None

    if steps == 0:
        return TrajectoryRecord(
            t=np.zeros(0),
            E=np.zeros((B, 0)),
            xi_H_sq=np.zeros((B, 0)),
            u_h1=np.zeros((B, 0)),
            F=np.zeros((B, 0)),
            F_p=np.zeros((B, 0)),
            final_modes=(U, V),
            meta={"dt": dt, "kind": kind, "steps": 0, "stride": stride},
        )

    j0 = 0
    if resume_state is None:
        u_phys = to_phys(U, grid)
        G = forcing_controlled(u_phys, 0.0) if kind == "controlled" else forcing_modes(u_phys)
        rec.take_sample(0, 0.0, U, V, V + alpha * U, u_phys)
        for ob in observers:
            ob(SampleView(grid, U, V, u_phys, 0.0, 0))
        if ident is not None:
            ident.open_step(0.0, U, V + alpha * U, u_phys, G)
        V = V + 0.5 * dt * G
    else:
        j0 = int(resume_state["step"])
        if not 0 < j0 < steps:
            raise ValueError(f"resume step {j0} outside (0, {steps})")
        rec.set_state(resume_state["acc"])
        rec.first_sample = j0 // stride + 1
    for j in range(j0, steps):
        t_next = (j + 1) * dt
        U, V = integ.flow(U, V)
        u_phys = to_phys(U, grid)
        G = (
            forcing_controlled(u_phys, t_next)
            if kind == "controlled"
            else forcing_modes(u_phys)
        )
        last = j == steps - 1
        V = V + (0.5 if last else 1.0) * dt * G
        half = np.zeros_like(V) if last else 0.5 * dt * G
        q_pre = V - half + alpha * U  # pre-noise (u_dot + alpha u) in modes
        if noisy:
            C = increment_block(model, dt, start_step + j, B)
            if opts.martingales:
                rec.push_martingale(q_pre, C, b, dt, u_phys, t_next)
        else:
            C = None
        if ident is not None:
            ident.close_step(t_next, U, q_pre, u_phys, G, C)
        if noisy:
            V[..., :K] += C
        if not last and (j + 1) % stride == 0:
            V_obs = V - half
            rec.take_sample((j + 1) // stride, t_next, U, V_obs, V_obs + alpha * U, u_phys)
            for ob in observers:
                ob(SampleView(grid, U, V_obs, u_phys, t_next, j + 1))
            if not np.all(np.isfinite(rec.E[:, (j + 1) // stride])):
                raise BlowUpError(j + 1, t_next, kind)
        if ident is not None and not last:
            ident.open_step(t_next, U, (V - half) + alpha * U, u_phys, G)
        if (
            checkpoint_every
            and on_checkpoint is not None
            and not last
            and (j + 1) % checkpoint_every == 0
        ):
            on_checkpoint(
                {"U": U.copy(), "V": V.copy(), "step": j + 1, "t": t_next, "acc": rec.get_state()}
            )
    # final sample (steps is a multiple of stride when callers align T; otherwise
    # the last partial window is still sampled at T)
    s_last = steps // stride
    t_T = steps * dt
    rec.take_sample(s_last, t_T, U, V, V + alpha * U, u_phys)
    for ob in observers:
        ob(SampleView(grid, U, V, u_phys, t_T, steps))
    if not np.all(np.isfinite(rec.E[:, s_last])):
        raise BlowUpError(steps, t_T, kind)

    out = rec.as_record()
    out.identity = ident.as_dict() if ident is not None else None
    out.final_modes = (U, V)
    out.meta = {
        "dt": dt,
        "kind": kind,
        "steps": steps,
        "stride": stride,
        "seed": getattr(model, "seed", None),
        "p_exponent": opts.p_exponent,
        "alpha": alpha,
        "first_sample": rec.first_sample,
    }
    return out
