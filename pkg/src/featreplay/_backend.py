"""Kernel backend selection.

``FEATREPLAY_BACKEND=numpy`` forces the pure-numpy path; the default is the
numba path when numba imports cleanly.
"""
import logging
import os

from . import _kernels_numpy

log = logging.getLogger(__name__)

ENV_VAR = "FEATREPLAY_BACKEND"


def _load(name):
    if name == "numpy":
        return _kernels_numpy
    if name == "numba":
        from . import _kernels_numba
        return _kernels_numba
    raise ValueError(f"{ENV_VAR} must be 'numba' or 'numpy', got {name!r}")


def _select():
    requested = os.environ.get(ENV_VAR, "").strip().lower()
    if requested:
        return requested, _load(requested)
    try:
        return "numba", _load("numba")
    except ImportError:
        log.warning("numba unavailable, falling back to numpy kernels")
        return "numpy", _kernels_numpy


BACKEND, kernels = _select()


def get_kernels(name=None):
    """Kernel module for ``name``, or the active one."""
    return kernels if name is None else _load(name)
