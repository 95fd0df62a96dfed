"""Kernel backend selection.

The log-domain transport kernels exist twice: a numba-compiled version and a
pure-numpy twin.  ``KSFLOW_BACKEND=numpy`` in the environment forces the
fallback (useful for debugging and for the benchmark in ``benchmarks/``);
anything else picks numba when it imports cleanly.
"""

import os

_FORCED = os.environ.get("KSFLOW_BACKEND", "").strip().lower()

if _FORCED not in ("", "numba", "numpy"):
    raise ValueError(f"KSFLOW_BACKEND must be 'numba' or 'numpy', got {_FORCED!r}")

if _FORCED == "numpy":
    _HAVE_NUMBA = False
else:
    try:
        import numba  # noqa: F401

        _HAVE_NUMBA = True
    except ImportError:
        if _FORCED == "numba":
            raise
        _HAVE_NUMBA = False

BACKEND = "numba" if _HAVE_NUMBA else "numpy"

if BACKEND == "numba":
    from ._kernels_numba import softmin_pass
else:
    from ._kernels_numpy import softmin_pass

__all__ = ["BACKEND", "softmin_pass"]
