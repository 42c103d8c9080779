"""Batch command-line interface.

Subcommands: simulate | couple | mixing | verify | irreducibility | spectrum.
Each consumes an INI manifest (all keys optional, defaults documented in
config.DEFAULTS), writes artifacts into the output directory, and embeds
the manifest hash in every file. WAVEMIX_THREADS overrides --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from ._threads import set_workers
from .config import ExperimentManifest, assumption_warnings, parse_config
from .dynamics import RecordOptions, run_trajectory
from .grid import State, Weights, eigenvalues, h2_sq
from .io_sinks import (
    load_checkpoint,
    save_checkpoint,
    write_csv,
    write_ndjson,
    write_rate_svg,
)
from .mixing import (
    DualLipschitzDictionary,
    dual_lipschitz_distance,
    fit_polynomial_rate,
    irreducibility_probe,
    make_random_state,
    run_ensemble,
    state_norm_H,
)

_CSV_COLUMNS = (
    "t",
    "xi_H_sq",
    "xi_psi_sq",
    "E",
    "E_psi",
    "F",
    "F_psi",
    "F_p",
    "F_psi_p",
    "M",
    "M_psi",
    "QV",
    "QV_psi",
)


def _outpath(manifest: ExperimentManifest, out_dir: str | None, name: str) -> str:
    base = out_dir or manifest.get("output", "directory")
    return os.path.join(base, name)


def cmd_simulate(manifest: ExperimentManifest, out_dir: str | None, fmt: str) -> int:
    grid = manifest.build_grid()
    params = manifest.build_params(grid)
    model = manifest.build_model(grid)
    integ = manifest.build_integrator(grid)
    rng = np.random.default_rng(manifest.get("experiment", "state_seed"))
    norm0 = manifest.get("experiment", "y0_norm")
    y0 = (
        make_random_state(grid, rng, norm0, params.alpha)
        if norm0 > 0
        else State(np.zeros(grid.n), np.zeros(grid.n))
    )
    opts = RecordOptions(
        sample_stride=manifest.get("integrator", "sample_stride"),
        weighted=True,
        martingales=True,
        weighted_martingales=True,
    )
    ckpt_every = manifest.get("output", "checkpoint_every")
    resume_from = manifest.get("output", "resume_from")
    ckpt_path = _outpath(manifest, out_dir, "checkpoint.npz")
    resume_state = load_checkpoint(resume_from, manifest.hash) if resume_from else None
    rec = run_trajectory(
        y0,
        params,
        model,
        integ,
        manifest.get("integrator", "horizon"),
        options=opts,
        checkpoint_every=ckpt_every,
        on_checkpoint=(lambda c: save_checkpoint(ckpt_path, manifest.hash, c)) if ckpt_every else None,
        resume_state=resume_state,
    )
    first = rec.meta.get("first_sample", 0)
    sl = slice(first, None)
    columns = {
        "t": rec.t[sl],
        "xi_H_sq": rec.xi_H_sq[0, sl],
        "xi_psi_sq": rec.xi_psi_sq[0, sl],
        "E": rec.E[0, sl],
        "E_psi": rec.E_psi[0, sl],
        "F": rec.F[0, sl],
        "F_psi": rec.F_psi[0, sl],
        "F_p": rec.F_p[0, sl],
        "F_psi_p": rec.F_psi_p[0, sl],
        "M": rec.M[0, sl],
        "M_psi": rec.M_psi[0, sl],
        "QV": rec.QV[0, sl],
        "QV_psi": rec.QV_psi[0, sl],
    } if rec.t.size else {c: np.zeros(0) for c in _CSV_COLUMNS}
    header = manifest.header()
    if fmt == "ndjson":
        rows = (
            {c: columns[c][i] for c in _CSV_COLUMNS} for i in range(len(columns["t"]))
        )
        write_ndjson(_outpath(manifest, out_dir, "trajectory.ndjson"), rows, header)
    else:
        write_csv(_outpath(manifest, out_dir, "trajectory.csv"), columns, header)
    print(f"simulate: wrote {len(np.atleast_1d(columns['t']))} samples")
    return 0


def cmd_couple(manifest: ExperimentManifest, out_dir: str | None, fmt: str) -> int:
    from .coupling import foias_prodi_check, run_coupled, tv_surrogate

    grid = manifest.build_grid()
    params = manifest.build_params(grid)
    model = manifest.build_model(grid)
    integ = manifest.build_integrator(grid)
    rng = np.random.default_rng(manifest.get("experiment", "state_seed"))
    norm0 = manifest.get("experiment", "y0_norm")
    d = manifest.get("experiment", "separation")
    y0 = (
        make_random_state(grid, rng, norm0, params.alpha)
        if norm0 > 0
        else State(np.zeros(grid.n), np.zeros(grid.n))
    )
    direction = make_random_state(grid, rng, d, params.alpha)
    y0p = State(y0.pos + direction.pos, y0.vel + direction.vel)
    N = manifest.get("experiment", "coupling_rank")
    run = run_coupled(
        y0,
        y0p,
        params,
        model,
        integ,
        N=N,
        T=manifest.get("integrator", "horizon"),
        stop_cfg=manifest.build_stopping(),
        paths=manifest.get("experiment", "paths"),
        sample_stride=manifest.get("integrator", "sample_stride"),
        c_sigma=manifest.get("stopping", "c_sigma"),
        p_sigma=manifest.get("stopping", "p_sigma"),
    )
    records = []
    for i, t in enumerate(run.t):
        records.append(
            {
                "kind": "sample",
                "t": float(t),
                "w_uv_sq": run.w_uv_sq[:, i],
                "w_uup_sq": run.w_uup_sq[:, i],
                "drift_cum": run.drift_cum[:, i],
                "tau_fired": np.where(np.isnan(run.tau), -1.0, run.tau) <= t,
            }
        )
    records.append(
        {
            "kind": "stopping",
            "tau": run.tau,
            "theta": run.theta,
            "sigma": run.sigma,
            "tau_by_system": run.tau_by_system,
        }
    )
    b_min = model.b_min_forced
    records.append(
        {
            "kind": "girsanov",
            "drift_total": run.drift_cum[:, -1],
            "tv_surrogate": [tv_surrogate(v, b_min) for v in run.drift_cum[:, -1]],
            "b_min": b_min,
        }
    )
    if N == 0:
        records.append(
            {
                "kind": "contraction_fit",
                "note": "degenerate N=0: auxiliary system equals the second primal, fit skipped",
            }
        )
    else:
        for variant in ("part1", "part2"):
            fit = foias_prodi_check(run, variant, params, eps=1.0, T0=1.0 if variant == "part2" else 0.0)
            fit.pop("per_path_C")
            records.append({"kind": "contraction_fit", **fit})
    write_ndjson(_outpath(manifest, out_dir, "coupled.ndjson"), records, manifest.header())
    print(f"couple: {run.paths} paths to T={run.t[-1]:g}, N={N}")
    return 0


def cmd_mixing(manifest: ExperimentManifest, out_dir: str | None, fmt: str) -> int:
    grid = manifest.build_grid()
    params = manifest.build_params(grid)
    model = manifest.build_model(grid)
    integ = manifest.build_integrator(grid)
    T = manifest.get("integrator", "horizon")
    paths = manifest.get("experiment", "paths")
    rng = np.random.default_rng(manifest.get("experiment", "state_seed"))
    norm_b = manifest.get("experiment", "y0_norm") or 5.0
    y_a = State(np.zeros(grid.n), np.zeros(grid.n))
    y_b = make_random_state(grid, rng, norm_b, params.alpha)
    dictionary = DualLipschitzDictionary.build(
        grid, model, manifest.get("experiment", "dictionary_size"), rng, params.alpha
    )
    stride_t = integ.dt * manifest.get("integrator", "sample_stride")
    eval_times = tuple(
        t for t in np.unique(np.concatenate([[1.0], np.arange(2.5, T + 1e-9, 2.5)]))
        if abs(round(t / stride_t) * stride_t - t) < 1e-9 and t <= T
    )
    opts = RecordOptions(
        sample_stride=manifest.get("integrator", "sample_stride"), martingales=False
    )
    ens = {}
    for label, y0 in (("origin", y_a), ("displaced", y_b)):
        ens[label] = run_ensemble(
            y0, params, model, integ, T, paths,
            options=opts, dictionary=dictionary, eval_times=eval_times,
        )
    times = sorted(set(ens["origin"].dl_values) & set(ens["displaced"].dl_values))
    dists = np.array(
        [
            dual_lipschitz_distance(ens["origin"].dl_values[t], ens["displaced"].dl_values[t])
            for t in times
        ]
    )
    header = manifest.header()
    write_csv(
        _outpath(manifest, out_dir, "distance.csv"),
        {"t": np.array(times), "distance": dists},
        header,
    )
    fit = None
    try:
        fit = fit_polynomial_rate(times, dists, burn_in=manifest.get("experiment", "burn_in"))
        summary = {
            "kind": "rate_fit",
            "slope": fit.slope,
            "C": fit.C,
            "r_squared": fit.r_squared,
            "estimator": "fixed randomized dictionary; lower bound of the metric",
        }
    except ValueError as exc:
        summary = {"kind": "rate_fit", "error": str(exc)}
    write_ndjson(_outpath(manifest, out_dir, "mixing.ndjson"), [summary], header)
    write_rate_svg(_outpath(manifest, out_dir, "rate.svg"), times, dists, fit, header)
    print(f"mixing: {len(times)} distance samples, slope="
          f"{getattr(fit, 'slope', float('nan')):.3f}" if fit else "mixing: fit unavailable")
    return 0


def cmd_verify(manifest: ExperimentManifest, out_dir: str | None, fmt: str) -> int:
    from .verify import run_verification

    results = run_verification(manifest)
    write_ndjson(_outpath(manifest, out_dir, "verify.ndjson"), results, manifest.header())
    failed = [r for r in results if not r["passed"]]
    for r in results:
        print(f"[{'PASS' if r['passed'] else 'FAIL'}] {r['check']}: {r['detail']}")
    return 0 if not failed else 1


def cmd_irreducibility(manifest: ExperimentManifest, out_dir: str | None, fmt: str) -> int:
    grid = manifest.build_grid()
    params = manifest.build_params(grid)
    model = manifest.build_model(grid)
    integ = manifest.build_integrator(grid)
    rng = np.random.default_rng(manifest.get("experiment", "state_seed"))
    report = irreducibility_probe(
        manifest.get("experiment", "reach_radius"),
        manifest.get("experiment", "ball_radius"),
        params,
        model,
        integ,
        rng,
        paths=manifest.get("experiment", "paths"),
    )
    write_ndjson(
        _outpath(manifest, out_dir, "irreducibility.ndjson"), [report], manifest.header()
    )
    print(
        f"irreducibility: T={report['T_found']:g}, p0_hat={report['p0_hat']:.3f} "
        f"(95% lower {report['wilson_lower']:.4f})"
    )
    return 0


def cmd_spectrum(manifest: ExperimentManifest, out_dir: str | None, fmt: str) -> int:
    grid = manifest.build_grid()
    model = manifest.build_model(grid)
    lam = eigenvalues(grid)[: model.K]
    e_h2 = np.sqrt(np.array([h2_sq(e, grid) for e in model.basis]))
    write_csv(
        _outpath(manifest, out_dir, "spectrum.csv"),
        {
            "k": np.arange(1, model.K + 1),
            "lambda": lam,
            "b": model.b,
            "mode_h2_norm": e_h2,
        },
        {**manifest.header(), **model.sums()},
    )
    print(f"spectrum: {model.K} modes")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "couple": cmd_couple,
    "mixing": cmd_mixing,
    "verify": cmd_verify,
    "irreducibility": cmd_irreducibility,
    "spectrum": cmd_spectrum,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="wavemix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="INI manifest path or inline text")
        p.add_argument("--seed", type=int, default=None, help="override noise seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--single-thread", action="store_true")
        p.add_argument("--format", choices=("csv", "ndjson"), default="csv")
    args = parser.parse_args(argv)

    env_threads = os.environ.get("WAVEMIX_THREADS")
    if args.single_thread:
        set_workers(1)
    elif env_threads:
        set_workers(int(env_threads))
    elif args.threads:
        set_workers(args.threads)

    try:
        overrides = {}
        if args.seed is not None:
            overrides["noise.seed"] = args.seed
        overrides["experiment.name"] = args.command
        manifest = parse_config(args.config, overrides)
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    for warning in assumption_warnings(manifest):
        print(f"warning: {warning}", file=sys.stderr)
    try:
        return _COMMANDS[args.command](manifest, args.out, args.format)
    except Exception as exc:  # structured failure log, nonzero exit
        err = {"error": type(exc).__name__, "message": str(exc)}
        try:
            write_ndjson(
                _outpath(manifest, args.out, "error.ndjson"), [err], manifest.header()
            )
        except OSError:
            pass
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
