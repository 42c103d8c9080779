"""Expanded white-in-time forcing on the sine basis.

The driving noise is W(t) = sum_i b_i beta_i(t) e_i with independent scalar
Brownian motions beta_i and the orthonormal eigenmodes e_i of the grid
operator. Increments are generated counter-based (Philox keyed by seed,
counter by step), so any path/step pair can be regenerated statelessly:
ensembles parallelise without a shared mutable generator and checkpoint
resume replays the identical stream. Row p of a step's block draw is
independent of how many rows are drawn, which pins per-(seed, path, step)
reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox

from .grid import (
    GridSpec,
    eigenvalues,
    h2_sq,
    hs_sq,
    inner,
    smooth_cutoff,
    to_modes,
    to_phys,
)

__all__ = [
    "build_basis",
    "power_law_coeffs",
    "NoiseModel",
    "NoiseIncrement",
    "sample_increment",
    "increment_block",
    "project_P_N",
    "project_Q_N",
    "qn_cutoff_ratio",
    "assumption_report",
]


def build_basis(grid: GridSpec, K: int) -> np.ndarray:
    """First K orthonormal sine modes as a (K, n) array of node values."""
    if not 1 <= K <= grid.n:
        raise ValueError(f"mode count K={K} must satisfy 1 <= K <= n={grid.n}")
    j = np.arange(grid.n)
    k = np.arange(1, K + 1)[:, None]
    return np.sin(k * np.pi * (j + 1) / (grid.n + 1)) / np.sqrt(grid.half_width)


def power_law_coeffs(b0: float, q: float, K: int) -> np.ndarray:
    """Coefficients b_i = b0 * i^(-q), i = 1..K."""
    return b0 * np.arange(1, K + 1, dtype=float) ** (-q)


@dataclass
class NoiseModel:
    """Forcing specification: basis, coefficients, and the RNG key.

    Attributes:
        grid: spatial grid the basis lives on.
        b: length-K coefficient vector; b_i != 0 required for i <= n_forced.
        n_forced: number of modes guaranteed to be forced.
        seed: 64-bit key of the counter-based generator.
    """

    grid: GridSpec
    b: np.ndarray
    n_forced: int
    seed: int
    basis: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        if self.b.ndim != 1 or len(self.b) < 1:
            raise ValueError("coefficient vector b must be 1-D and non-empty")
        if len(self.b) > self.grid.n:
            raise ValueError(
                f"K={len(self.b)} coefficients exceed grid resolution n={self.grid.n}"
            )
        if not 0 <= self.n_forced <= len(self.b):
            raise ValueError(
                f"n_forced={self.n_forced} must lie in [0, K={len(self.b)}]"
            )
        if self.n_forced > 0 and np.any(self.b[: self.n_forced] == 0.0):
            bad = int(np.nonzero(self.b[: self.n_forced] == 0.0)[0][0]) + 1
            raise ValueError(f"forced mode {bad} has zero coefficient")
        self.basis = build_basis(self.grid, len(self.b))
        gram = self.grid.dx * (self.basis @ self.basis.T)
        if np.max(np.abs(gram - np.eye(len(self.b)))) > 1e-10:
            raise ValueError("basis failed the orthonormality check")

    @property
    def K(self) -> int:
        return len(self.b)

    @property
    def b_min_forced(self) -> float:
        """Smallest |b_i| over the forced band (positive by construction)."""
        if self.n_forced == 0:
            return 0.0
        return float(np.min(np.abs(self.b[: self.n_forced])))

    def sums(self) -> dict:
        """The three coefficient sums B1, B2, B3 with weighted-mode norms."""
        from .grid import Weights

        phi = Weights(self.grid).phi
        b1 = float(np.sum(self.b**2))
        phi_e_sq = self.grid.dx * np.sum((phi * self.basis) ** 2, axis=1)
        b2 = float(np.sum(self.b**2 * phi_e_sq))
        e_h2 = np.sqrt(np.array([h2_sq(e, self.grid) for e in self.basis]))
        b3 = float(np.sum(np.abs(self.b) * e_h2))
        return {"B1": b1, "B2": b2, "B3": b3}

    def tail_fractions(self) -> dict:
        """Fraction of each sum contributed by the last quarter of modes.

        A heavy tail flags a coefficient sequence whose infinite extension
        would not be summable (the H2 mode norms grow like k^2).
        """
        from .grid import Weights

        phi = Weights(self.grid).phi
        k4 = 3 * self.K // 4
        terms1 = self.b**2
        phi_e_sq = self.grid.dx * np.sum((phi * self.basis) ** 2, axis=1)
        terms2 = self.b**2 * phi_e_sq
        e_h2 = np.sqrt(np.array([h2_sq(e, self.grid) for e in self.basis]))
        terms3 = np.abs(self.b) * e_h2
        out = {}
        for name, terms in (("B1", terms1), ("B2", terms2), ("B3", terms3)):
            total = float(np.sum(terms))
            out[name] = float(np.sum(terms[k4:]) / total) if total > 0 else 0.0
        return out


@dataclass
class NoiseIncrement:
    """One step's forcing: per-mode b_i * dbeta_i and the assembled field."""

    per_mode: np.ndarray
    dt: float

    def field(self, model: NoiseModel) -> np.ndarray:
        modes = np.zeros(model.grid.n)
        modes[: model.K] = self.per_mode
        return to_phys(modes, model.grid)


def increment_block(model: NoiseModel, dt: float, step: int, paths: int) -> np.ndarray:
    """Per-mode increments for paths 0..paths-1 at one step, shape (paths, K).

    Row p is bitwise-reproducible from (seed, p, step) alone; drawing a
    larger block never changes earlier rows.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if step < 0 or paths < 1:
        raise ValueError("step must be >= 0 and paths >= 1")
    gen = Generator(Philox(key=np.uint64(model.seed), counter=[0, 0, 0, step]))
    z = gen.standard_normal((paths, model.K))
    return z * (model.b * np.sqrt(dt))


def sample_increment(model: NoiseModel, dt: float, step: int = 0, path: int = 0) -> NoiseIncrement:
    """Increment of a single path; Gaussian per mode with variance b_i^2 dt."""
    block = increment_block(model, dt, step, path + 1)
    return NoiseIncrement(per_mode=block[path], dt=dt)


def project_P_N(g: np.ndarray, model: NoiseModel, N: int) -> np.ndarray:
    """Orthogonal projection onto span{e_1..e_N}."""
    if not 0 <= N <= model.K:
        raise ValueError(f"projection rank N={N} must lie in [0, K={model.K}]")
    modes = to_modes(g, model.grid)
    modes[..., N:] = 0.0
    return to_phys(modes, model.grid)


def project_Q_N(g: np.ndarray, model: NoiseModel, N: int) -> np.ndarray:
    """Complement projection Id - P_N."""
    if not 0 <= N <= model.K:
        raise ValueError(f"projection rank N={N} must lie in [0, K={model.K}]")
    modes = to_modes(g, model.grid)
    modes[..., :N] = 0.0
    return to_phys(modes, model.grid)


def qn_cutoff_ratio(
    grid: GridSpec,
    N: int,
    a_cut: float,
    s: float,
    trials: int,
    rng: np.random.Generator,
    spectral_decay: float = 2.0,
) -> float:
    """Worst observed ||Q_N(chi_A f)|| / ||f||_s over random smooth fields.

    chi_A is the smooth cutoff equal to 1 on [-A/2, A/2] and 0 outside
    [-A, A]. High sine modes oscillate fast, so localising a smooth field
    leaves little mass beyond mode N once N is large; the ratio decays in N.
    Degenerate draws with ||f||_s = 0 are skipped.
    """
    if not 0 <= N <= grid.n:
        raise ValueError(f"projection rank N={N} must lie in [0, n={grid.n}]")
    if a_cut > grid.half_width:
        raise ValueError(
            f"cutoff width {a_cut} exceeds the domain half-width {grid.half_width}"
        )
    chi = smooth_cutoff(grid.x, a_cut)
    worst = 0.0
    for _ in range(trials):
        amps = rng.standard_normal(grid.n) * np.arange(1, grid.n + 1, dtype=float) ** (
            -spectral_decay
        )
        f = to_phys(amps, grid)
        denom = hs_sq(f, grid, s)
        if denom <= 0.0:
            continue
        cut_modes = to_modes(chi * f, grid)
        cut_modes[:N] = 0.0
        num = np.sum(cut_modes * cut_modes)
        worst = max(worst, float(np.sqrt(num / denom)))
    return worst


def assumption_report(model: NoiseModel, h: np.ndarray) -> dict:
    """Summability diagnostics for the coefficient sequence and forcing h.

    Reports B1, B2, B3 with tail fractions, the h-expansion sum
    sum |(h, e_i)| ||e_i||_2, and ||phi h||; warnings flag sequences whose
    tails still carry more than 10% of the total.
    """
    from .grid import Weights

    sums = model.sums()
    tails = model.tail_fractions()
    h = model.grid.check_field(h)
    h_coefs = np.abs(model.grid.dx * (model.basis @ h))
    e_h2 = np.sqrt(np.array([h2_sq(e, model.grid) for e in model.basis]))
    h_terms = h_coefs * e_h2
    h_sum = float(np.sum(h_terms))
    h_tail = float(np.sum(h_terms[3 * model.K // 4 :]) / h_sum) if h_sum > 0 else 0.0
    phi_h = float(np.sqrt(inner(Weights(model.grid).phi * h, Weights(model.grid).phi * h, model.grid)))
    warnings = [
        f"coefficient sum {name} looks divergent: last-quarter tail carries "
        f"{frac:.1%} of the total"
        for name, frac in tails.items()
        if frac > 0.10
    ]
    if h_tail > 0.10:
        warnings.append(
            f"forcing expansion sum looks divergent: tail fraction {h_tail:.1%}"
        )
    return {
        **sums,
        "tail_fractions": tails,
        "h_expansion_sum": h_sum,
        "h_tail_fraction": h_tail,
        "phi_h_norm": phi_h,
        "warnings": warnings,
    }
