"""Kernel backend selection.

The compiled extension is preferred; set FEDLORA_BACKEND=python to force
the numpy fallback (used by the benchmark and the backend parity tests).
"""

import os

_requested = os.environ.get("FEDLORA_BACKEND", "").strip().lower()

if _requested in ("", "cython", "compiled", "c"):
    try:
        from fedlora._kernels._jacobi import jacobi_sweeps

        BACKEND = "cython"
    except ImportError:
        if _requested:
            raise
        from fedlora._kernels._jacobi_py import jacobi_sweeps

        BACKEND = "python"
elif _requested in ("python", "numpy", "py"):
    from fedlora._kernels._jacobi_py import jacobi_sweeps

    BACKEND = "python"
else:
    raise ValueError(f"unknown FEDLORA_BACKEND value: {_requested!r}")

__all__ = ["jacobi_sweeps", "BACKEND"]
