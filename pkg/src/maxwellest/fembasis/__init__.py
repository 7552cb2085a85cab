"""Reference bases, quadrature and Piola transforms on tetrahedra."""

import numpy as np

from .piola import GeomMap, push_forward
from .quadrature import (
    MAX_TET_DEGREE,
    QuadRule,
    segment_rule,
    simplex_monomial_integral,
    tet_quadrature,
    tet_rule,
    triangle_monomial_integral,
    triangle_rule,
)
from .reference import (
    EDGE_VERTS,
    FACE_VERTS,
    PERMS3,
    REF_VERTS,
    ReferenceBasis,
    edge_flip_matrix,
    face_perm_matrix,
    get_reference,
    orientation_matrix,
    tet_orientation,
    tet_orthonormal_scalar,
)


from functools import lru_cache


@lru_cache(maxsize=None)
def _lagrange_scalar_coeffs(q):
    """Lagrange basis on the principal lattice (coefficients over monomials).

    For q = 1 these are the four barycentric hat functions; the q = 0 basis
    is the constant 1.
    """
    from .polynomials import eval_monomials, scalar_dim

    if q == 0:
        nodes = np.array([[0.25, 0.25, 0.25]])
    else:
        nodes = np.array(
            [
                (i / q, j / q, k / q)
                for i in range(q + 1)
                for j in range(q + 1 - i)
                for k in range(q + 1 - i - j)
            ]
        )
        # order so vertices come out in a stable position-independent way
        nodes = nodes[np.lexsort(nodes.T)]
    vand = eval_monomials(q, nodes)
    assert vand.shape == (scalar_dim(q), scalar_dim(q))
    return np.linalg.inv(vand).T


def eval_scalar_basis(q, pts):
    """Values and gradients of the Lagrange P_q basis at reference points."""
    from .polynomials import eval_monomials, scalar_gradient

    pts = np.asarray(pts, dtype=float)
    coeffs = _lagrange_scalar_coeffs(q)
    vals = coeffs @ eval_monomials(q, pts).T
    grads = np.einsum(
        "ncm,pm->npc", scalar_gradient(coeffs, q), eval_monomials(q, pts)
    )
    return vals, grads


def eval_nedelec_basis(q, pts):
    """Values and curls of the nodal N_q basis at reference points."""
    ref = get_reference("N", q)
    pts = np.asarray(pts, dtype=float)
    return ref.values(pts), ref.curls(pts)


def eval_rt_basis(q, pts):
    """Values and divergences of the nodal RT_q basis at reference points."""
    ref = get_reference("RT", q)
    pts = np.asarray(pts, dtype=float)
    return ref.values(pts), ref.divs(pts)
