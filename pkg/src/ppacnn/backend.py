"""Kernel backend selection.

The simulator's per-instruction plane kernels exist in two interchangeable
implementations: a numba-jitted one (fast, default) and a pure-numpy one.
Selection happens once at import time via the PPACNN_BACKEND environment
variable:

    PPACNN_BACKEND=numba   force numba, raise if unavailable
    PPACNN_BACKEND=numpy   force the pure-numpy fallback
    (unset/auto)           numba if importable, else numpy

``python -m ppacnn.bench`` times both backends side by side.
"""

import os

_choice = os.environ.get("PPACNN_BACKEND", "auto").strip().lower()

if _choice in ("", "auto"):
    try:
        from . import _kernels_numba as kernels
        BACKEND = "numba"
    except ImportError:
        from . import _kernels_numpy as kernels
        BACKEND = "numpy"
elif _choice == "numba":
    from . import _kernels_numba as kernels
    BACKEND = "numba"
elif _choice == "numpy":
    from . import _kernels_numpy as kernels
    BACKEND = "numpy"
else:
    raise RuntimeError(
        "PPACNN_BACKEND must be 'numba', 'numpy' or 'auto', got %r" % _choice
    )

HAS_NUMBA = BACKEND == "numba"
