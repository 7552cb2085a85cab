"""Numerical quadrature on the reference tetrahedron, triangle and segment.

Rules are conical (Duffy-collapsed) Gauss-Jacobi products, so a rule
requested at polynomial degree d integrates every polynomial of total
degree <= d exactly, with positive weights.  Reference domains:

* tetrahedron: vertices (0,0,0), (1,0,0), (0,1,0), (0,0,1), volume 1/6
* triangle:    vertices (0,0), (1,0), (0,1), area 1/2
* segment:     [0, 1]
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

from ..errors import UnsupportedDegreeError

MAX_TET_DEGREE = 14


@dataclass(frozen=True)
class QuadRule:
    """Points (reference coordinates) and weights of a quadrature rule."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def npoints(self):
        return self.weights.size


def _gauss_jacobi01(n, alpha):
    """Gauss-Jacobi rule for integral_0^1 f(x) (1-x)^alpha dx."""
    if alpha == 0:
        t, w = np.polynomial.legendre.leggauss(n)
    else:
        t, w = roots_jacobi(n, alpha, 0.0)
    x = 0.5 * (t + 1.0)
    return x, w * 0.5 ** (alpha + 1)


@lru_cache(maxsize=None)
def segment_rule(degree):
    """Gauss-Legendre rule on [0, 1] exact to the given degree."""
    n = max(1, degree // 2 + 1)
    x, w = _gauss_jacobi01(n, 0)
    return QuadRule(x.reshape(-1, 1), w, 2 * n - 1)


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Conical product rule on the reference triangle."""
    n = max(1, degree // 2 + 1)
    x1, w1 = _gauss_jacobi01(n, 1)
    x2, w2 = _gauss_jacobi01(n, 0)
    u = np.repeat(x1, n)
    v = np.tile(x2, n) * (1.0 - u)
    w = np.outer(w1, w2).ravel()
    return QuadRule(np.column_stack([u, v]), w, 2 * n - 1)


@lru_cache(maxsize=None)
def _tet_rule_any(degree):
    n = max(1, degree // 2 + 1)
    x1, w1 = _gauss_jacobi01(n, 2)
    x2, w2 = _gauss_jacobi01(n, 1)
    x3, w3 = _gauss_jacobi01(n, 0)
    x = np.repeat(x1, n * n)
    y = np.tile(np.repeat(x2, n), n) * (1.0 - x)
    z = np.tile(x3, n * n) * (1.0 - x) * (1.0 - np.tile(np.repeat(x2, n), n))
    w = (w1[:, None, None] * w2[None, :, None] * w3[None, None, :]).ravel()
    return QuadRule(np.column_stack([x, y, z]), w, 2 * n - 1)


def tet_rule(degree):
    """Rule on the reference tetrahedron exact to the given total degree.

    Internal entry point without the public degree cap; use
    :func:`tet_quadrature` for the contract-checked operation.
    """
    if degree < 0:
        raise UnsupportedDegreeError(f"quadrature degree must be >= 0, got {degree}")
    return _tet_rule_any(degree)


def tet_quadrature(degree):
    """Quadrature rule on the reference tetrahedron, degrees 0..14."""
    if not 0 <= degree <= MAX_TET_DEGREE:
        raise UnsupportedDegreeError(
            f"tet quadrature supports degrees 0..{MAX_TET_DEGREE}, got {degree}"
        )
    return _tet_rule_any(degree)


def simplex_monomial_integral(a, b, c):
    """Exact integral of x^a y^b z^c over the reference tetrahedron.

    Evaluates a! b! c! / (a + b + c + 3)! which follows from the Dirichlet
    integral on the simplex.
    """
    from math import factorial

    return factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 3)


def triangle_monomial_integral(a, b):
    """Exact integral of u^a v^b over the reference triangle."""
    from math import factorial

    return factorial(a) * factorial(b) / factorial(a + b + 2)
