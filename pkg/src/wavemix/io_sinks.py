"""Output sinks: CSV series, NDJSON event records, SVG plots, checkpoints.

Every file embeds the manifest hash, package version, and base seed.
Numbers are serialised with round-trip precision (repr of float64).
"""

from __future__ import annotations

import json
import os

import numpy as np

__all__ = [
    "write_csv",
    "write_ndjson",
    "write_rate_svg",
    "save_checkpoint",
    "load_checkpoint",
]


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: str, columns: dict, header: dict) -> None:
    """Column-oriented CSV with '#'-prefixed header metadata lines.

    All columns must share a length; zero-length columns produce a
    header-only file.
    """
    names = list(columns)
    lengths = {len(np.atleast_1d(columns[c])) for c in names}
    if len(lengths) > 1:
        raise ValueError(f"ragged columns: lengths {sorted(lengths)}")
    n = lengths.pop() if lengths else 0
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in header.items():
            fh.write(f"# {k}: {v}\n")
        fh.write(",".join(names) + "\n")
        cols = [np.atleast_1d(columns[c]) for c in names]
        for i in range(n):
            fh.write(",".join(_fmt(col[i]) for col in cols) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_ndjson(path: str, records, header: dict) -> None:
    """One JSON object per line; the first line is the header record."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "header", **_jsonable(header)}) + "\n")
        for rec in records:
            fh.write(json.dumps(_jsonable(rec)) + "\n")


def write_rate_svg(path: str, times, distances, fit, header: dict) -> None:
    """Log-log distance decay plot with the fitted power law."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    times = np.asarray(times, dtype=float)
    distances = np.asarray(distances, dtype=float)
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.loglog(times + 1.0, distances, "o-", ms=4, label="ensemble distance")
    if fit is not None:
        tt = np.linspace(times.min(), times.max(), 64)
        ax.loglog(
            tt + 1.0,
            fit.C * (tt + 1.0) ** fit.slope,
            "--",
            label=f"fit slope {fit.slope:.2f}",
        )
    ax.set_xlabel("t + 1")
    ax.set_ylabel("dual-Lipschitz estimate")
    ax.legend(frameon=False)
    ax.set_title(f"hash {header.get('manifest_hash', '?')}", fontsize=8)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)


def save_checkpoint(path: str, manifest_hash: str, ckpt: dict) -> None:
    """Serialise a runner checkpoint; refuses to resume under another manifest."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    acc = ckpt["acc"]
    np.savez(
        path,
        manifest_hash=manifest_hash,
        step=ckpt["step"],
        t=ckpt["t"],
        U=ckpt["U"],
        V=ckpt["V"],
        m_run=acc["m_run"],
        qv_run=acc["qv_run"],
        mpsi_run=acc["mpsi_run"],
        qvpsi_run=acc["qvpsi_run"],
        prev_t=acc["prev_t"],
        prev_E=acc["prev_E"],
        prev_Es=acc["prev_Es"] if acc["prev_Es"] is not None else np.zeros(0),
        **{f"int_{k}": v for k, v in acc["ints"].items()},
    )


def load_checkpoint(path: str, manifest_hash: str) -> dict:
    with np.load(path, allow_pickle=False) as data:
        stored = str(data["manifest_hash"])
        if stored != manifest_hash:
            raise ValueError(
                f"checkpoint was written under manifest {stored}, refusing to resume "
                f"under {manifest_hash}"
            )
        prev_es = data["prev_Es"]
        return {
            "step": int(data["step"]),
            "t": float(data["t"]),
            "U": data["U"],
            "V": data["V"],
            "acc": {
                "m_run": data["m_run"],
                "qv_run": data["qv_run"],
                "mpsi_run": data["mpsi_run"],
                "qvpsi_run": data["qvpsi_run"],
                "ints": {k[4:]: data[k] for k in data.files if k.startswith("int_")},
                "prev_t": float(data["prev_t"]),
                "prev_E": data["prev_E"],
                "prev_Es": None if prev_es.size == 0 else prev_es,
            },
        }
