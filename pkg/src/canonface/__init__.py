"""Canonical-map toolkit for dense face correspondence, tracking and evaluation."""

from . import _threads  # noqa: F401  (must run before numba is imported)
from ._threads import configure_threads

__version__ = "0.1.0"

__all__ = ["configure_threads", "__version__"]
