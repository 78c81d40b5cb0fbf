"""Numba switch.

Set ``KPGMRF_NUMBA=0`` to run the pure-numpy kernels instead of the
compiled ones.  Numba's own ``NUMBA_DISABLE_JIT`` also works but leaves the
loop kernels running as slow interpreted Python.
"""

import os

_flag = os.environ.get("KPGMRF_NUMBA", "1").strip().lower()
USE_NUMBA = _flag not in ("0", "false", "no", "off")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None
    USE_NUMBA = False

numba_default = {
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "boundscheck": False,
    "error_model": "numpy",
}


def njit(func):
    """Compile ``func`` with the project defaults, or return it untouched."""
    if numba is None:
        return func
    return numba.njit(**numba_default)(func)
