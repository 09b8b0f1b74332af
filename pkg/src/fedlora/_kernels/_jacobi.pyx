# cython: boundscheck=False, wraparound=False, cdivision=True
"""One-sided Jacobi orthogonalization sweeps, compiled.

Operates on a column-transposed workspace: row j of ``wt`` holds column j
of the matrix being factorized, so each plane rotation touches two
contiguous rows. ``vt`` accumulates the right-hand rotations. The sweep
order (p < q, row-cyclic) is fixed so results are reproducible bit for bit
on a given build.
"""

from libc.math cimport fabs, sqrt


def jacobi_sweeps(double[:, ::1] wt, double[:, ::1] vt, double tol, int max_sweeps):
    """Rotate rows of wt/vt in place until all row pairs are orthogonal.

    Returns (sweeps_used, converged, worst_off) where worst_off is the
    largest normalized off-diagonal dot product seen in the final sweep.
    """
    cdef Py_ssize_t n = wt.shape[0]
    cdef Py_ssize_t m = wt.shape[1]
    cdef Py_ssize_t nv = vt.shape[1]
    cdef Py_ssize_t p, q, i
    cdef int sweep
    cdef long rotations
    cdef double alpha, beta, gamma, limit, off, worst
    cdef double zeta, t, c, s, xp, xq

    if n < 2:
        return 0, True, 0.0

    worst = 0.0
    for sweep in range(max_sweeps):
        rotations = 0
        worst = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    xp = wt[p, i]
                    xq = wt[q, i]
                    alpha += xp * xp
                    beta += xq * xq
                    gamma += xp * xq
                limit = sqrt(alpha * beta)
                if limit > 0.0 and fabs(gamma) / limit > worst:
                    worst = fabs(gamma) / limit
                if gamma == 0.0 or fabs(gamma) <= tol * limit:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    xp = wt[p, i]
                    xq = wt[q, i]
                    wt[p, i] = c * xp - s * xq
                    wt[q, i] = s * xp + c * xq
                for i in range(nv):
                    xp = vt[p, i]
                    xq = vt[q, i]
                    vt[p, i] = c * xp - s * xq
                    vt[q, i] = s * xp + c * xq
                rotations += 1
        if rotations == 0:
            return sweep + 1, True, worst
    return max_sweeps, False, worst
