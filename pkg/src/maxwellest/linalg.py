"""Shared direct linear algebra: factorization wrappers with refinement.

Real matrices are always factored in real arithmetic; complex right-hand
sides are solved componentwise, which halves memory and time for the real
symmetric systems this package produces.  Large sparse systems go through
UMFPACK (via cvxopt) which handles 3D curl-curl fill far better than
SuperLU; small systems use dense LAPACK.
"""

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalFailure, SolverFailure

try:
    from cvxopt import matrix as _cvxmat
    from cvxopt import spmatrix as _cvxsp
    from cvxopt import umfpack as _umfpack

    _HAVE_UMFPACK = True
except Exception:  # pragma: no cover - cvxopt is a hard dependency in practice
    _HAVE_UMFPACK = False

DENSE_CUTOFF = 800


class DenseFactor:
    """LU factorization of a dense real or complex matrix."""

    def __init__(self, mat):
        import warnings

        mat = np.asarray(mat)
        self.real = not np.iscomplexobj(mat) or np.abs(mat.imag).max() == 0.0
        work = mat.real if self.real and np.iscomplexobj(mat) else mat
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                self.lu = sla.lu_factor(work, check_finite=False)
        except (ValueError, sla.LinAlgError) as exc:
            raise NumericalFailure(f"dense LU failed: {exc}") from exc
        self.shape = mat.shape

    def solve(self, rhs):
        rhs = np.asarray(rhs)
        if self.real and np.iscomplexobj(rhs):
            return sla.lu_solve(self.lu, rhs.real, check_finite=False) + 1j * (
                sla.lu_solve(self.lu, rhs.imag, check_finite=False)
            )
        return sla.lu_solve(self.lu, rhs, check_finite=False)


class _UmfpackFactor:
    def __init__(self, mat):
        coo = mat.tocoo()
        self.shape = mat.shape
        self.real = not np.iscomplexobj(coo.data) or np.abs(coo.data.imag).max() == 0.0
        data = coo.data.real if self.real else coo.data.astype(complex)
        tc = "d" if self.real else "z"
        self._a = _cvxsp(
            data, coo.row.astype(np.int64), coo.col.astype(np.int64), mat.shape, tc=tc
        )
        try:
            symbolic = _umfpack.symbolic(self._a)
            self._num = _umfpack.numeric(self._a, symbolic)
        except ArithmeticError as exc:
            raise SolverFailure(f"UMFPACK factorization failed: {exc}") from exc

    def _solve1(self, rhs):
        x = _cvxmat(rhs)
        _umfpack.solve(self._a, self._num, x)
        return np.array(x).ravel()

    def solve(self, rhs):
        rhs = np.asarray(rhs)
        single = rhs.ndim == 1
        cols = rhs[:, None] if single else rhs
        out = np.empty(cols.shape, dtype=complex if np.iscomplexobj(rhs) else float)
        for k in range(cols.shape[1]):
            col = cols[:, k]
            if self.real and np.iscomplexobj(col):
                out[:, k] = self._solve1(col.real.copy()) + 1j * self._solve1(
                    col.imag.copy()
                )
            else:
                out[:, k] = self._solve1(np.ascontiguousarray(col))
        return out[:, 0] if single else out


class _SuperLUFactor:
    def __init__(self, mat):
        mat = mat.tocsc()
        self.real = not np.iscomplexobj(mat.data) or np.abs(mat.data.imag).max() == 0.0
        if self.real:
            mat = sp.csc_matrix((mat.data.real, mat.indices, mat.indptr), mat.shape)
        try:
            self._lu = spla.splu(
                mat,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.01,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise SolverFailure(f"SuperLU factorization failed: {exc}") from exc
        self.shape = mat.shape

    def solve(self, rhs):
        rhs = np.asarray(rhs)
        if self.real and np.iscomplexobj(rhs):
            return self._lu.solve(rhs.real) + 1j * self._lu.solve(rhs.imag)
        return self._lu.solve(rhs)


def factorize(mat, dense_cutoff=DENSE_CUTOFF):
    """Factor a (sparse or dense) square matrix for repeated solves."""
    if sp.issparse(mat):
        if mat.shape[0] <= dense_cutoff:
            return DenseFactor(mat.toarray())
        if _HAVE_UMFPACK:
            return _UmfpackFactor(mat.tocsc())
        return _SuperLUFactor(mat)
    return DenseFactor(mat)


def solve_refined(mat, rhs, factor=None, passes=1):
    """Direct solve with a fixed number of iterative-refinement passes."""
    factor = factorize(mat) if factor is None else factor
    x = factor.solve(rhs)
    for _ in range(passes):
        r = rhs - mat @ x
        x = x + factor.solve(r)
    return x
