"""Experiment manifests: defaults, INI parsing, validation, and hashing.

A manifest fully determines a run; its SHA-256 hash is embedded in every
output file so any artifact can be reproduced bit-for-bit from its header
in single-threaded mode (and, because transforms parallelise only across
batch rows, in practice for any thread count).
"""

from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec
from .noise import NoiseModel, power_law_coeffs, assumption_report
from .dynamics import Integrator, PhysParams, default_alpha
from .coupling import StoppingConfig

__all__ = ["ExperimentManifest", "parse_config", "manifest_hash", "DEFAULTS"]

_EXPERIMENTS = ("simulate", "couple", "mixing", "verify", "irreducibility", "spectrum")

# (section, key) -> (type, default)
DEFAULTS: dict = {
    ("grid", "half_width"): (float, 40.0),
    ("grid", "n"): (int, 1023),
    ("physics", "gamma"): (float, 0.5),
    ("physics", "m"): (float, 0.5),
    ("physics", "alpha"): (float, None),  # None -> min(gamma/4, 1/4)
    ("physics", "h"): (str, "0.3*e1+0.2*e3"),
    ("noise", "b0"): (float, 0.5),
    ("noise", "q"): (float, 3.5),
    ("noise", "modes"): (int, 256),
    ("noise", "n_forced"): (int, 64),
    ("noise", "b_list"): (str, ""),
    ("noise", "seed"): (int, 20240901),
    ("integrator", "dt"): (float, 2e-3),
    ("integrator", "horizon"): (float, 10.0),
    ("integrator", "sample_stride"): (int, 5),
    ("stopping", "m_c"): (float, 4.0),
    ("stopping", "k_c"): (float, 2.0),
    ("stopping", "l_c"): (float, 0.0),
    ("stopping", "rho"): (float, 20.0),
    ("stopping", "p"): (float, 2.0),
    ("stopping", "c_sigma"): (float, 1.0),
    ("stopping", "p_sigma"): (float, 2.0),
    ("experiment", "name"): (str, "simulate"),
    ("experiment", "paths"): (int, 2),
    ("experiment", "coupling_rank"): (int, 64),
    ("experiment", "y0_norm"): (float, 0.0),
    ("experiment", "y0_prime_norm"): (float, 0.0),
    ("experiment", "separation"): (float, 1.0),
    ("experiment", "ball_radius"): (float, 0.5),
    ("experiment", "reach_radius"): (float, 2.0),
    ("experiment", "dictionary_size"): (int, 256),
    ("experiment", "burn_in"): (float, 5.0),
    ("experiment", "state_seed"): (int, 7),
    ("output", "directory"): (str, "out"),
    ("output", "formats"): (str, "csv,ndjson"),
    ("output", "checkpoint_every"): (int, 0),
    ("output", "resume_from"): (str, ""),
}


@dataclass
class ExperimentManifest:
    """Validated, fully-resolved experiment settings."""

    settings: dict
    hash: str = field(init=False)

    def __post_init__(self):
        self.hash = manifest_hash(self.settings)

    def __getitem__(self, key: tuple[str, str]):
        return self.settings[f"{key[0]}.{key[1]}"]

    def get(self, section: str, key: str):
        return self.settings[f"{section}.{key}"]

    # --- object builders ---------------------------------------------

    def build_grid(self) -> GridSpec:
        return GridSpec(self.get("grid", "half_width"), self.get("grid", "n"))

    def h_field(self, grid: GridSpec) -> np.ndarray:
        return parse_h_spec(self.get("physics", "h"), grid)

    def build_params(self, grid: GridSpec) -> PhysParams:
        gamma = self.get("physics", "gamma")
        alpha = self.get("physics", "alpha")
        if alpha is None:
            alpha = default_alpha(gamma)
        return PhysParams(
            gamma=gamma, m=self.get("physics", "m"), alpha=alpha, h=self.h_field(grid)
        )

    def build_model(self, grid: GridSpec) -> NoiseModel:
        b_list = self.get("noise", "b_list")
        if b_list:
            b = np.array([float(x) for x in b_list.split(",") if x.strip() != ""])
        else:
            b = power_law_coeffs(
                self.get("noise", "b0"), self.get("noise", "q"), self.get("noise", "modes")
            )
        return NoiseModel(
            grid, b, n_forced=self.get("noise", "n_forced"), seed=self.get("noise", "seed")
        )

    def build_integrator(self, grid: GridSpec) -> Integrator:
        return Integrator(grid, self.get("physics", "gamma"), self.get("integrator", "dt"))

    def build_stopping(self) -> StoppingConfig:
        return StoppingConfig(
            M_c=self.get("stopping", "m_c"),
            K_c=self.get("stopping", "k_c"),
            L_c=self.get("stopping", "l_c"),
            rho=self.get("stopping", "rho"),
            p=self.get("stopping", "p"),
        )

    def header(self) -> dict:
        from . import __version__

        return {
            "manifest_hash": self.hash,
            "version": __version__,
            "seed": self.get("noise", "seed"),
        }


def manifest_hash(settings: dict) -> str:
    blob = json.dumps(settings, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


_H_TERM = re.compile(r"^\s*([+-]?\s*\d+(?:\.\d+)?(?:e[+-]?\d+)?)\s*\*\s*e(\d+)\s*$")


def parse_h_spec(spec: str, grid: GridSpec) -> np.ndarray:
    """Forcing profile syntax: 'zero' or 'c1*e<k1>+c2*e<k2>+...' (sine modes)."""
    from .grid import to_phys

    spec = spec.strip()
    if spec in ("zero", "0", ""):
        return np.zeros(grid.n)
    modes = np.zeros(grid.n)
    for term in re.split(r"(?=[+-])", spec.replace(" ", "")):
        if not term:
            continue
        mt = _H_TERM.match(term)
        if not mt:
            raise ValueError(
                f"cannot parse forcing term '{term}': expected coeff*e<k>, e.g. 0.3*e1"
            )
        coeff, k = float(mt.group(1).replace(" ", "")), int(mt.group(2))
        if not 1 <= k <= grid.n:
            raise ValueError(f"forcing mode index {k} outside 1..{grid.n}")
        modes[k - 1] += coeff
    return to_phys(modes, grid)


def parse_config(source: str | None = None, overrides: dict | None = None) -> ExperimentManifest:
    """Parse an INI document (path or inline text) into a manifest.

    Unknown sections or keys are rejected by name; every module-level
    invariant is validated here so downstream builders cannot fail. With
    source None, all defaults apply.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str.lower
    if source is not None:
        text = source
        if "\n" not in source and not source.strip().startswith("["):
            with open(source, "r", encoding="utf-8") as fh:
                text = fh.read()
        cp.read_string(text)

    known_sections = {s for s, _ in DEFAULTS}
    for sec in cp.sections():
        if sec not in known_sections:
            raise ValueError(f"unknown config section [{sec}]")
        for key in cp[sec]:
            if (sec, key) not in DEFAULTS:
                raise ValueError(f"unknown config key '{key}' in section [{sec}]")

    settings: dict = {}
    for (sec, key), (typ, default) in DEFAULTS.items():
        if cp.has_option(sec, key):
            raw = cp.get(sec, key)
            try:
                val = typ(raw) if typ is not bool else raw.lower() in ("1", "true", "yes")
            except ValueError as exc:
                raise ValueError(f"config key {sec}.{key}={raw!r} is not a valid {typ.__name__}") from exc
        else:
            val = default
        settings[f"{sec}.{key}"] = val
    if overrides:
        for dotted, val in overrides.items():
            if dotted not in settings:
                raise ValueError(f"unknown override '{dotted}'")
            settings[dotted] = val

    _validate(settings)
    return ExperimentManifest(settings)


def _validate(s: dict) -> None:
    def bad(msg):
        raise ValueError(msg)

    if s["grid.half_width"] <= 0:
        bad("half_width must be positive")
    if s["grid.n"] < 8:
        bad("n must be >= 8")
    if s["physics.gamma"] <= 0:
        bad("gamma must be positive")
    if not 0.0 < s["physics.m"] < 1.0:
        bad("m must lie in (0,1)")
    alpha = s["physics.alpha"]
    if alpha is not None and not 0 < alpha <= default_alpha(s["physics.gamma"]) + 1e-12:
        bad(
            f"alpha must lie in (0, min(gamma/4, 1/4)] = "
            f"(0, {default_alpha(s['physics.gamma'])}]"
        )
    if s["integrator.dt"] <= 0:
        bad("dt must be positive")
    if s["integrator.horizon"] < 0:
        bad("horizon must be nonnegative")
    if s["integrator.sample_stride"] < 1:
        bad("sample_stride must be >= 1")
    if s["experiment.name"] not in _EXPERIMENTS:
        bad(f"experiment name must be one of {_EXPERIMENTS}")
    if s["noise.b_list"]:
        try:
            b = [float(x) for x in s["noise.b_list"].split(",") if x.strip() != ""]
        except ValueError:
            bad("b_list must be a comma-separated list of reals")
        if len(b) < 1:
            bad("b_list must contain at least one coefficient")
        if len(b) > s["grid.n"]:
            bad("b_list longer than the grid resolution n")
        if any(v == 0.0 for v in b[: s["noise.n_forced"]]):
            bad("forced modes (i <= n_forced) must have nonzero coefficients")
    else:
        if s["noise.modes"] < 1 or s["noise.modes"] > s["grid.n"]:
            bad("noise modes must lie in [1, n]")
        if s["noise.n_forced"] > s["noise.modes"]:
            bad("n_forced cannot exceed the number of noise modes")
    if s["experiment.coupling_rank"] > (
        len([x for x in s["noise.b_list"].split(",") if x.strip()]) if s["noise.b_list"] else s["noise.modes"]
    ):
        bad("coupling_rank N cannot exceed the number of noise modes K")
    if s["stopping.p"] < 1:
        bad("stopping exponent p must be >= 1")
    if s["output.checkpoint_every"] < 0:
        bad("checkpoint_every must be nonnegative")
    if (
        s["output.checkpoint_every"]
        and s["output.checkpoint_every"] % s["integrator.sample_stride"] != 0
    ):
        bad("checkpoint_every must be a multiple of sample_stride")


def assumption_warnings(manifest: ExperimentManifest) -> list[str]:
    """Summability warnings for the configured coefficient sequence."""
    grid = manifest.build_grid()
    model = manifest.build_model(grid)
    report = assumption_report(model, manifest.h_field(grid))
    return report["warnings"]
