# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled one-sided Jacobi sweep kernel.

Same contract as ``_jacobi_py.jacobi_sweeps``: rows of ``work`` are the
columns being orthogonalized, ``rot`` accumulates the plane rotations.
"""

from libc.math cimport sqrt, fabs, copysign


def jacobi_sweeps(double[:, ::1] work, double[:, ::1] rot, double tol, int max_sweeps):
    cdef Py_ssize_t n = work.shape[0]
    cdef Py_ssize_t m = work.shape[1]
    cdef Py_ssize_t nv = rot.shape[1]
    cdef Py_ssize_t p, q, i
    cdef int sweeps = 0, sweep
    cdef bint rotated
    cdef double app, aqq, apq, zeta, t, c, s, wp, wq

    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                app = 0.0
                aqq = 0.0
                apq = 0.0
                for i in range(m):
                    app += work[p, i] * work[p, i]
                    aqq += work[q, i] * work[q, i]
                    apq += work[p, i] * work[q, i]
                if app == 0.0 or aqq == 0.0:
                    continue
                if fabs(apq) <= tol * sqrt(app * aqq):
                    continue
                zeta = (aqq - app) / (2.0 * apq)
                t = copysign(1.0, zeta) / (fabs(zeta) + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    wp = work[p, i]
                    wq = work[q, i]
                    work[p, i] = c * wp - s * wq
                    work[q, i] = s * wp + c * wq
                for i in range(nv):
                    wp = rot[p, i]
                    wq = rot[q, i]
                    rot[p, i] = c * wp - s * wq
                    rot[q, i] = s * wp + c * wq
                rotated = True
        sweeps += 1
        if not rotated:
            break
    return sweeps
