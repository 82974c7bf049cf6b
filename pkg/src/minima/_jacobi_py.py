"""Pure numpy fallback for the one-sided Jacobi sweep kernel.

Layout note: both arrays are handed over transposed, so the "columns"
being orthogonalized are contiguous rows here. ``work`` has one row per
column of the input matrix, ``rot`` accumulates the applied plane
rotations starting from the identity. Semantics match the compiled
kernel in ``_jacobi_cy`` bit-for-bit up to summation order inside dot
products.
"""

import math

import numpy as np


def jacobi_sweeps(work: np.ndarray, rot: np.ndarray, tol: float, max_sweeps: int) -> int:
    """Orthogonalize the rows of ``work`` in place by cyclic plane rotations.

    Returns the number of sweeps performed. A sweep visits every row pair
    (p, q), p < q, in lexicographic order and rotates unless the pair is
    already orthogonal relative to ``tol``.
    """
    n = work.shape[0]
    sweeps = 0
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                app = float(np.dot(work[p], work[p]))
                aqq = float(np.dot(work[q], work[q]))
                apq = float(np.dot(work[p], work[q]))
                if app == 0.0 or aqq == 0.0:
                    continue
                if abs(apq) <= tol * math.sqrt(app * aqq):
                    continue
                zeta = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                wp = work[p].copy()
                work[p] = c * wp - s * work[q]
                work[q] = s * wp + c * work[q]
                vp = rot[p].copy()
                rot[p] = c * vp - s * rot[q]
                rot[q] = s * vp + c * rot[q]
                rotated = True
        sweeps += 1
        if not rotated:
            break
    return sweeps
