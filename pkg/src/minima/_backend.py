"""Selects the Jacobi sweep kernel at import time.

The compiled extension is preferred; the pure numpy twin is used when the
extension is absent or when ``MINIMA_PURE_PYTHON=1`` is set. Both expose
``jacobi_sweeps(work, rot, tol, max_sweeps) -> int`` with identical
semantics, so everything above this module is backend-agnostic.
"""

import os

if os.environ.get("MINIMA_PURE_PYTHON", "") == "1":
    from minima import _jacobi_py as _kernel

    BACKEND = "python"
else:
    try:
        from minima import _jacobi_cy as _kernel  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from minima import _jacobi_py as _kernel

        BACKEND = "python"

jacobi_sweeps = _kernel.jacobi_sweeps


def backend_name() -> str:
    """Name of the active sweep kernel: ``"cython"`` or ``"python"``."""
    return BACKEND
