"""Pure-numpy fallback for the Jacobi sweep kernel.

Same algorithm and sweep order as the compiled version; per-pair dot
products go through numpy, so the two backends agree to rounding but not
bit for bit.
"""

import math

import numpy as np


def jacobi_sweeps(wt: np.ndarray, vt: np.ndarray, tol: float, max_sweeps: int):
    n = wt.shape[0]
    if n < 2:
        return 0, True, 0.0

    worst = 0.0
    for sweep in range(max_sweeps):
        rotations = 0
        worst = 0.0
        for p in range(n - 1):
            row_p = wt[p]
            for q in range(p + 1, n):
                row_q = wt[q]
                alpha = float(np.dot(row_p, row_p))
                beta = float(np.dot(row_q, row_q))
                gamma = float(np.dot(row_p, row_q))
                limit = math.sqrt(alpha * beta)
                if limit > 0.0:
                    worst = max(worst, abs(gamma) / limit)
                if gamma == 0.0 or abs(gamma) <= tol * limit:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                xp = row_p.copy()
                np.multiply(row_p, c, out=row_p)
                row_p -= s * row_q
                np.multiply(row_q, c, out=row_q)
                row_q += s * xp
                vp = vt[p].copy()
                np.multiply(vt[p], c, out=vt[p])
                vt[p] -= s * vt[q]
                np.multiply(vt[q], c, out=vt[q])
                vt[q] += s * vp
                rotations += 1
        if rotations == 0:
            return sweep + 1, True, worst
    return max_sweeps, False, worst
