"""Thread-count control shared by every numba kernel in the package.

``CANONFACE_THREADS`` caps parallelism. It must be read before numba is
imported, because numba sizes its thread pool from ``NUMBA_NUM_THREADS`` at
import time; this module is therefore imported first by the package.
"""

import os
import warnings

ENV_VAR = "CANONFACE_THREADS"


def _requested_threads():
    raw = os.environ.get(ENV_VAR, "").strip()
    if not raw:
        return None
    if raw == "max":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be a positive integer or 'max', got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{ENV_VAR} must be >= 1, got {n}")
    return n


_REQUESTED = _requested_threads()
if _REQUESTED is not None and "NUMBA_NUM_THREADS" not in os.environ:
    # oversubscription is allowed: numba accepts more threads than cores
    os.environ["NUMBA_NUM_THREADS"] = str(max(_REQUESTED, os.cpu_count() or 1))

import numba  # noqa: E402

# an outdated system TBB only disables that layer; numba falls back silently otherwise
warnings.filterwarnings("ignore", message="The TBB threading layer requires")


def configure_threads(n=None):
    """Set the numba worker count; ``None`` re-reads ``CANONFACE_THREADS``.

    Returns the count actually in effect (capped by the pool size).
    """
    if n is None:
        n = _requested_threads()
    if n is None:
        return numba.get_num_threads()
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


configure_threads()
