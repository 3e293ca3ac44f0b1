"""Kernel backend selection.

Hot voxel loops have two implementations: numba-compiled kernels and a
pure-numpy fallback. ``NODKIT_BACKEND`` picks one (``numba`` or ``numpy``);
when unset, numba is used if it imports.
"""
import logging
import os

logger = logging.getLogger(__name__)

BACKENDS = ("numba", "numpy")


def _numba_available():
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def resolve_backend(name=None):
    """Return the backend name to use, honouring ``NODKIT_BACKEND``."""
    if name is None:
        name = os.environ.get("NODKIT_BACKEND", "").strip().lower() or None
    if name is None:
        return "numba" if _numba_available() else "numpy"
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not _numba_available():
        logger.warning("numba requested but not importable; using numpy kernels")
        return "numpy"
    return name
