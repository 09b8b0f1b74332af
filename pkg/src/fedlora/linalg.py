"""Dense matrix primitives: products, norms, and a deterministic SVD.

Matrices are 2-D float64 C-contiguous numpy arrays (row-major). Products
and norms are backed by numpy; the SVD is an in-repo one-sided Jacobi so
that its sweep order, tie handling, and sign convention are fully pinned
down. That determinism is what makes aggregated adapter broadcasts
reproducible byte for byte across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedlora._kernels import jacobi_sweeps
from fedlora.errors import NumericalError, ShapeError

# Convergence of the Jacobi sweeps: normalized off-diagonal mass below
# JACOBI_TOL, hard cap on sweep count.
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100

# Singular values at or below this are treated as numerically zero when
# ranks are counted.
RANK_TOL = 1e-10


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array."""
    a = np.ascontiguousarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={a.ndim}")
    return a


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NumericalError(f"{what} contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product a @ b with shape checking."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"inner dimensions differ: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}"
        )
    return _check_finite(a @ b, "matmul result")


def frobenius_norm(m) -> float:
    """sqrt of the sum of squared entries."""
    m = as_matrix(m)
    return float(np.sqrt(np.sum(m * m)))


@dataclass
class SvdResult:
    """Thin SVD: u (rows x k) with orthonormal columns, non-increasing
    singular values (length k), v_t (k x cols) with orthonormal rows,
    where k = min(rows, cols)."""

    u: np.ndarray
    singular_values: np.ndarray
    v_t: np.ndarray

    @property
    def rank(self) -> int:
        """Number of singular values above RANK_TOL."""
        return int(np.sum(self.singular_values > RANK_TOL))


def svd_reconstruct(res: SvdResult) -> np.ndarray:
    return (res.u * res.singular_values) @ res.v_t


def _complete_columns(u: np.ndarray, defined: np.ndarray) -> None:
    """Fill columns of u where defined is False with an orthonormal
    completion drawn from the standard basis (deterministic).

    Undefined columns of u are zero, so projecting against all of u only
    removes the components along columns that are already set.
    """
    rows = u.shape[0]
    basis_next = 0
    for j in np.flatnonzero(~defined):
        while True:
            if basis_next >= rows:
                raise NumericalError("failed to complete orthonormal basis")
            v = np.zeros(rows)
            v[basis_next] = 1.0
            basis_next += 1
            for _ in range(2):  # two Gram-Schmidt passes
                v = v - u @ (u.T @ v)
            norm = np.linalg.norm(v)
            if norm > 0.5:
                u[:, j] = v / norm
                break


def _jacobi_svd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on a tall-or-square matrix (rows >= cols).

    Returns (u, s, v_t) with u rows x cols, s length cols, v_t cols x cols.
    """
    rows, cols = m.shape
    wt = np.ascontiguousarray(m.T.copy())  # row j holds column j
    vt = np.eye(cols)
    sweeps, converged, worst = jacobi_sweeps(wt, vt, JACOBI_TOL, JACOBI_MAX_SWEEPS)
    if not converged:
        raise NumericalError(
            f"jacobi svd did not converge: {sweeps} sweeps, "
            f"residual off-diagonal {worst:.3e} (tol {JACOBI_TOL:.1e}), shape {rows}x{cols}"
        )
    s = np.sqrt(np.sum(wt * wt, axis=1))
    # Stable order keeps ties in their algorithmic position.
    order = np.argsort(-s, kind="stable")
    s = s[order]
    wt = wt[order]
    vt = vt[order]
    defined = s > 0.0
    u = np.zeros((rows, cols))
    u[:, defined] = (wt[defined] / s[defined, None]).T
    if not defined.all():
        _complete_columns(u, defined)
    return u, s, vt


def svd(m) -> SvdResult:
    """Deterministic thin SVD.

    Sign convention: in each column of u the first entry of largest
    magnitude is non-negative, with the matching v_t row flipped to
    compensate.
    """
    m = as_matrix(m)
    _check_finite(m, "svd input")
    if m.shape[0] >= m.shape[1]:
        u, s, v_t = _jacobi_svd(m)
    else:
        ut, s, vt_t = _jacobi_svd(np.ascontiguousarray(m.T))
        u, v_t = vt_t.T, ut.T
        u = np.ascontiguousarray(u)
        v_t = np.ascontiguousarray(v_t)
    for j in range(u.shape[1]):
        lead = int(np.argmax(np.abs(u[:, j])))
        if u[lead, j] < 0.0:
            u[:, j] = -u[:, j]
            v_t[j, :] = -v_t[j, :]
    return SvdResult(u=u, singular_values=s, v_t=v_t)


def truncate_svd(res: SvdResult, r: int) -> SvdResult:
    """Keep the leading min(r, k) singular triplets.

    The reconstruction of the result is the best Frobenius rank-r
    approximation of the original matrix; the squared error equals the
    sum of the discarded squared singular values.
    """
    if r < 1:
        raise ShapeError(f"truncation rank must be >= 1, got {r}")
    k = res.singular_values.shape[0]
    if r >= k:
        return res
    return SvdResult(
        u=np.ascontiguousarray(res.u[:, :r]),
        singular_values=res.singular_values[:r].copy(),
        v_t=np.ascontiguousarray(res.v_t[:r, :]),
    )
