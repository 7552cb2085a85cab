"""Dense equality-constrained least-squares kernel.

Every local reconstruction problem reduces to

    minimize   x^H G x - 2 Re(x^H f)        (G real SPD)
    subject to C x = c                       (C real, possibly redundant)

with complex right-hand sides over real matrices.  The kernel factors the
symmetric KKT matrix; when the constraint block is rank-deficient (the
multiplier is then non-unique while the primal stays unique) it falls back
to a minimum-norm least-squares solve of the KKT system, which returns the
exact primal for consistent constraints.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from ..errors import InfeasibleConstraintsError, NumericalFailure


@dataclass
class KKTSystem:
    """Dense description of one constrained least-squares problem."""

    gram: np.ndarray
    rhs: np.ndarray
    constraints: np.ndarray
    constraint_rhs: np.ndarray
    note: str = ""

    def __post_init__(self):
        self.gram = np.asarray(self.gram, dtype=float)
        self.rhs = np.asarray(self.rhs, dtype=complex)
        n = self.gram.shape[0]
        self.constraints = np.asarray(self.constraints, dtype=float).reshape(-1, n)
        self.constraint_rhs = np.asarray(self.constraint_rhs, dtype=complex).reshape(
            self.constraints.shape[0]
        )

    @property
    def nx(self):
        return self.gram.shape[0]

    @property
    def nc(self):
        return self.constraints.shape[0]

    def objective(self, x, constant=0.0):
        """x^H G x - 2 Re(x^H f) plus an optional data constant."""
        x = np.asarray(x)
        return float(
            np.real(x.conj() @ (self.gram @ x)) - 2.0 * np.real(x.conj() @ self.rhs)
        ) + constant


def _solve_real_kkt(kkt, rhs2):
    """Solve the symmetric KKT matrix for stacked real rhs columns."""
    import warnings

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(kkt, check_finite=False)
        x = sla.lu_solve((lu, piv), rhs2, check_finite=False)
        # reject factorizations that went through a near-singular pivot
        if not np.all(np.isfinite(x)):
            raise sla.LinAlgError("non-finite solution")
        res = np.linalg.norm(kkt @ x - rhs2)
        if res > 1e-8 * (1.0 + np.linalg.norm(rhs2)):
            raise sla.LinAlgError("large KKT residual")
        return x
    except (sla.LinAlgError, ValueError):
        x, *_ = sla.lstsq(kkt, rhs2, check_finite=False, lapack_driver="gelsd")
        return x


def solve_constrained_ls(system, feas_tol=1e-10, stat_tol=1e-9,
                         return_multiplier=False):
    """Solve the constrained least-squares problem described by ``system``.

    Returns the primal minimizer (and the multiplier on request).  Raises
    InfeasibleConstraintsError when the constraints are inconsistent beyond
    ``feas_tol`` relative, NumericalFailure when the factorization cannot
    produce a stationary point.
    """
    g, f = system.gram, system.rhs
    c_mat, c_rhs = system.constraints, system.constraint_rhs
    n, m = system.nx, system.nc
    if n == 0:
        return (np.zeros(0, complex), np.zeros(m, complex)) if return_multiplier \
            else np.zeros(0, complex)

    if m == 0:
        try:
            cho = sla.cho_factor(g, check_finite=False)
        except sla.LinAlgError as exc:
            raise NumericalFailure(f"objective Gram not SPD: {exc}") from exc
        x = sla.cho_solve(cho, f.real, check_finite=False) + 1j * sla.cho_solve(
            cho, f.imag, check_finite=False
        )
        lam = np.zeros(0, dtype=complex)
    else:
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = g
        kkt[:n, n:] = c_mat.T
        kkt[n:, :n] = c_mat
        rhs2 = np.column_stack(
            [np.concatenate([f.real, c_rhs.real]),
             np.concatenate([f.imag, c_rhs.imag])]
        )
        sol = _solve_real_kkt(kkt, rhs2)
        x = sol[:n, 0] + 1j * sol[:n, 1]
        lam = sol[n:, 0] + 1j * sol[n:, 1]

    scale_c = 1.0 + np.linalg.norm(c_rhs)
    if m and np.linalg.norm(c_mat @ x - c_rhs) > feas_tol * scale_c:
        raise InfeasibleConstraintsError(
            f"constraint residual {np.linalg.norm(c_mat @ x - c_rhs):.3e} "
            f"exceeds {feas_tol:.1e} * {scale_c:.3e}"
            + (f" [{system.note}]" if system.note else "")
        )
    stat = g @ x - f + (c_mat.T @ lam if m else 0.0)
    scale_s = np.linalg.norm(f) + np.linalg.norm(g @ x) + 1e-300
    if np.linalg.norm(stat) > stat_tol * scale_s:
        raise NumericalFailure(
            f"stationarity residual {np.linalg.norm(stat) / scale_s:.3e} "
            f"exceeds {stat_tol:.1e}"
            + (f" [{system.note}]" if system.note else "")
        )
    if return_multiplier:
        return x, lam
    return x
