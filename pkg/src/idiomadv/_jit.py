"""numba switch.

Set ``IDIOMADV_DISABLE_NUMBA=1`` to run every kernel through its pure numpy
path. The flag is read once, at import time.
"""

import os

_FLAG = os.environ.get("IDIOMADV_DISABLE_NUMBA", "").strip().lower()
DISABLED = _FLAG in ("1", "true", "yes", "on")

try:
    if DISABLED:
        raise ImportError("numba disabled by IDIOMADV_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap


def backend():
    return "numba" if HAVE_NUMBA else "numpy"
