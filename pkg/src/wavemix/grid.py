"""Spatial discretisation of the real line on a truncated interval.

The domain [-L, L] carries n interior nodes with homogeneous Dirichlet
boundaries. The elliptic operator is A = -d2/dx2 + 1 with the standard
three-point stencil, whose eigenvectors are the discrete sine modes;
all spectral transforms in the package use that basis. The logarithmic
weight phi(x) = ln(x^2 + 2) and the space-time weight
psi(t, x) = phi(x) * (1 - exp(-t / phi(x))) compensate the lack of
compactness of the unbounded domain and enter every weighted norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as _fft

from ._threads import get_workers

__all__ = [
    "GridSpec",
    "State",
    "Weights",
    "apply_A",
    "inner",
    "diff_bonds",
    "h1_sq",
    "h2_sq",
    "hs_sq",
    "to_modes",
    "to_phys",
    "eigenvalues",
    "smooth_cutoff",
]


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid with n interior nodes on [-L, L], Dirichlet boundaries.

    Attributes:
        half_width: L > 0, half the domain length.
        n: number of interior nodes (>= 8); spacing is dx = 2L/(n+1).
    """

    half_width: float
    n: int

    def __post_init__(self):
        if not self.half_width > 0:
            raise ValueError(f"half_width must be positive, got {self.half_width}")
        if self.n < 8:
            raise ValueError(f"n must be >= 8, got {self.n}")

    @property
    def dx(self) -> float:
        return 2.0 * self.half_width / (self.n + 1)

    @property
    def x(self) -> np.ndarray:
        """Interior node coordinates x_j = -L + (j+1) dx."""
        return -self.half_width + (np.arange(self.n) + 1) * self.dx

    @property
    def x_bonds(self) -> np.ndarray:
        """Midpoints of the n+1 bonds between consecutive nodes (boundaries included)."""
        return -self.half_width + (np.arange(self.n + 1) + 0.5) * self.dx

    def check_field(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        if g.shape[-1] != self.n:
            raise ValueError(f"field length {g.shape[-1]} does not match grid n={self.n}")
        return g


@dataclass
class State:
    """Phase-space point (u, u_dot) of the second-order dynamics."""

    pos: np.ndarray
    vel: np.ndarray

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=float)
        self.vel = np.asarray(self.vel, dtype=float)
        if self.pos.shape != self.vel.shape:
            raise ValueError("pos and vel must live on the same grid")

    def copy(self) -> "State":
        return State(self.pos.copy(), self.vel.copy())


def apply_A(g: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Apply A = -d2/dx2 + 1 with zero Dirichlet padding."""
    g = grid.check_field(g)
    padded = np.zeros(g.shape[:-1] + (grid.n + 2,))
    padded[..., 1:-1] = g
    lap = (padded[..., 2:] - 2.0 * padded[..., 1:-1] + padded[..., :-2]) / grid.dx**2
    return -lap + g


def inner(f: np.ndarray, g: np.ndarray, grid: GridSpec) -> float:
    """Discrete L2 pairing dx * sum(f g)."""
    f = grid.check_field(f)
    g = grid.check_field(g)
    return grid.dx * float(np.dot(f, g)) if f.ndim == 1 else grid.dx * np.sum(f * g, axis=-1)


def diff_bonds(g: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Forward difference on the n+1 bonds, Dirichlet-padded.

    Returns (g_0 - 0, g_1 - g_0, ..., 0 - g_{n-1}) / dx so that
    dx * sum(Dg * Dg) reproduces the quadratic form of -d2/dx2 exactly
    (summation by parts has no boundary remainder).
    """
    g = grid.check_field(g)
    padded = np.zeros(g.shape[:-1] + (grid.n + 2,))
    padded[..., 1:-1] = g
    return (padded[..., 1:] - padded[..., :-1]) / grid.dx


def h1_sq(g: np.ndarray, grid: GridSpec) -> float:
    """Discrete H1 norm squared: ||g||^2 + ||Dg||^2 = (g, A g)."""
    d = diff_bonds(g, grid)
    return grid.dx * (np.sum(g * g, axis=-1) + np.sum(d * d, axis=-1))


def h2_sq(g: np.ndarray, grid: GridSpec) -> float:
    """Discrete H2 norm squared: ||g||^2 + ||Dg||^2 + ||D2g||^2."""
    g = grid.check_field(g)
    d = diff_bonds(g, grid)
    padded = np.zeros(g.shape[:-1] + (grid.n + 2,))
    padded[..., 1:-1] = g
    d2 = (padded[..., 2:] - 2.0 * padded[..., 1:-1] + padded[..., :-2]) / grid.dx**2
    return grid.dx * (
        np.sum(g * g, axis=-1) + np.sum(d * d, axis=-1) + np.sum(d2 * d2, axis=-1)
    )


# --- spectral transforms -------------------------------------------------
#
# Mode k (1-based) has node values sin(k pi (j+1)/(n+1)) / sqrt(L), which is
# orthonormal under `inner` and diagonalises apply_A with eigenvalue
# lambda_k = 1 + (2/dx^2)(1 - cos(k pi/(n+1))).


def eigenvalues(grid: GridSpec) -> np.ndarray:
    k = np.arange(1, grid.n + 1)
    return 1.0 + (2.0 / grid.dx**2) * (1.0 - np.cos(k * np.pi / (grid.n + 1)))


def to_modes(g: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Coefficients of g in the orthonormal sine basis (length n)."""
    scale = grid.dx / (2.0 * np.sqrt(grid.half_width))
    return _fft.dst(g, type=1, axis=-1, workers=get_workers()) * scale


def to_phys(modes: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Node values of the field with the given sine coefficients."""
    scale = 2.0 * np.sqrt(grid.half_width) / grid.dx
    return _fft.idst(modes * scale, type=1, axis=-1, workers=get_workers())


def hs_sq(g: np.ndarray, grid: GridSpec, s: float) -> float:
    """Spectral Sobolev norm squared, sum(lambda_k^s ghat_k^2).

    Coincides with inner(g, g) at s = 0 and with h1_sq at s = 1; fractional
    s interpolates between them, which the high-mode cutoff diagnostic needs.
    """
    modes = to_modes(g, grid)
    lam = eigenvalues(grid)
    return np.sum(lam**s * modes * modes, axis=-1)


# --- weights --------------------------------------------------------------


def _phi(x: np.ndarray) -> np.ndarray:
    return np.log(x * x + 2.0)


def _phi_prime(x: np.ndarray) -> np.ndarray:
    return 2.0 * x / (x * x + 2.0)


@dataclass
class Weights:
    """Cached weight tables phi(x_j) plus closed-form psi evaluators.

    psi(t, x) = phi(x) (1 - exp(-t/phi(x))) grows from 0 at t = 0 towards
    phi(x); its derivatives stay bounded uniformly in (t, x). Bond-midpoint
    tables serve the weighted gradient seminorm.
    """

    grid: GridSpec
    phi: np.ndarray = field(init=False)
    phi_bonds: np.ndarray = field(init=False)

    def __post_init__(self):
        self.phi = _phi(self.grid.x)
        self.phi_bonds = _phi(self.grid.x_bonds)

    def psi(self, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError(f"psi is defined for t >= 0, got t={t}")
        return self.phi * (1.0 - np.exp(-t / self.phi))

    def psi_t(self, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError(f"psi_t is defined for t >= 0, got t={t}")
        return np.exp(-t / self.phi)

    def psi_x(self, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError(f"psi_x is defined for t >= 0, got t={t}")
        r = t / self.phi
        return _phi_prime(self.grid.x) * ((1.0 - np.exp(-r)) - r * np.exp(-r))

    def psi_bonds(self, t: float) -> np.ndarray:
        """psi at bond midpoints, for the weighted gradient term."""
        if t < 0:
            raise ValueError(f"psi is defined for t >= 0, got t={t}")
        return self.phi_bonds * (1.0 - np.exp(-t / self.phi_bonds))

    def psi_t_bonds(self, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError(f"psi_t is defined for t >= 0, got t={t}")
        return np.exp(-t / self.phi_bonds)


def smooth_cutoff(x: np.ndarray, a: float) -> np.ndarray:
    """C2 cutoff equal to 1 on [-a/2, a/2], 0 outside [-a, a].

    Quintic smoothstep in between, monotone in |x|.
    """
    if a <= 0:
        raise ValueError(f"cutoff width must be positive, got {a}")
    r = np.abs(x)
    s = np.clip((a - r) / (a / 2.0), 0.0, 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
