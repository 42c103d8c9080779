"""Worker-count plumbing for batched FFT transforms.

Transforms are parallelised across batch rows only, so results are
bitwise-identical for any worker count; the single-thread switch exists
for users who want to pin CPU usage, not for reproducibility.
"""

import os

_DEFAULT = max(1, os.cpu_count() or 1)
_workers = None


def get_workers() -> int:
    if _workers is not None:
        return _workers
    env = os.environ.get("WAVEMIX_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return _DEFAULT


def set_workers(n: int | None) -> None:
    """Override the worker count (None restores env/auto detection)."""
    global _workers
    _workers = None if n is None else max(1, int(n))
