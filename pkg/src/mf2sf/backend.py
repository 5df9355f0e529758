"""Kernel backend selection and thread limits.

The hot kernels in :mod:`mf2sf.kernels` come in two flavors: numba-jitted
loops and pure-numpy fallbacks. The environment variable ``MF2SF_BACKEND``
picks one at import time:

* ``auto`` (default): numba when importable, numpy otherwise
* ``numba``: require numba, fail loudly if it is missing
* ``numpy``: force the fallback path even when numba is installed

``MF2SF_THREADS`` caps the number of worker threads used for parallelizable
per-frame work (evaluation); it does not affect the BLAS thread pool, which
is configured by the usual ``OPENBLAS_NUM_THREADS`` / ``OMP_NUM_THREADS``.
"""

from __future__ import annotations

import os

_CHOICES = ("auto", "numba", "numpy")


def _detect_backend() -> str:
    raw = os.environ.get("MF2SF_BACKEND", "auto").strip().lower()
    if raw not in _CHOICES:
        raise ValueError(
            f"MF2SF_BACKEND must be one of {_CHOICES}, got {raw!r}"
        )
    if raw == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if raw == "numba":
            raise
        return "numpy"
    return "numba"


BACKEND = _detect_backend()
USE_NUMBA = BACKEND == "numba"


def worker_threads() -> int:
    """Worker-thread cap from MF2SF_THREADS (default: all visible CPUs)."""
    raw = os.environ.get("MF2SF_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    n = int(raw)
    if n < 1:
        raise ValueError(f"MF2SF_THREADS must be >= 1, got {n}")
    return n
