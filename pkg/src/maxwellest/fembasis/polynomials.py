"""Monomial calculus on the reference tetrahedron.

Polynomials are stored as coefficient arrays over a graded monomial table
x^a y^b z^c with a+b+c <= d.  Scalar bases are (n, M) arrays, vector bases
(n, 3, M) arrays.  Differential operators (grad, curl, div) act exactly on
the coefficients, so derivative tables carry no discretization error.
"""

from functools import lru_cache

import numpy as np

from .quadrature import simplex_monomial_integral, triangle_monomial_integral


@lru_cache(maxsize=None)
def monomial_exponents(degree):
    """Exponent table of all 3D monomials with total degree <= degree."""
    exps = [
        (a, b, c)
        for d in range(degree + 1)
        for a in range(d, -1, -1)
        for b in range(d - a, -1, -1)
        for c in [d - a - b]
    ]
    return np.array(exps, dtype=np.int64).reshape(-1, 3)


@lru_cache(maxsize=None)
def _monomial_index(degree):
    exps = monomial_exponents(degree)
    return {tuple(e): i for i, e in enumerate(exps)}


def scalar_dim(degree):
    return (degree + 1) * (degree + 2) * (degree + 3) // 6


def eval_monomials(degree, pts):
    """Values of the monomial table at points, shape (npts, M)."""
    exps = monomial_exponents(degree)
    pts = np.asarray(pts, dtype=float)
    return np.prod(pts[:, None, :] ** exps[None, :, :], axis=2)


@lru_cache(maxsize=None)
def _derivative_matrix(degree, axis):
    """Matrix D with (d/dx_axis p) coefficients = coeffs @ D.T for scalar p."""
    exps = monomial_exponents(degree)
    idx = _monomial_index(degree)
    m = exps.shape[0]
    d = np.zeros((m, m))
    for i, e in enumerate(exps):
        if e[axis] > 0:
            tgt = list(e)
            tgt[axis] -= 1
            d[idx[tuple(tgt)], i] = e[axis]
    return d


def scalar_gradient(coeffs, degree):
    """Gradient of scalar polynomials: (n, M) -> (n, 3, M)."""
    return np.stack(
        [coeffs @ _derivative_matrix(degree, ax).T for ax in range(3)], axis=1
    )


def vector_curl(coeffs, degree):
    """Curl of vector polynomials, componentwise on the same table."""
    d = [np.asarray(_derivative_matrix(degree, ax)) for ax in range(3)]
    cx = coeffs[:, 2] @ d[1].T - coeffs[:, 1] @ d[2].T
    cy = coeffs[:, 0] @ d[2].T - coeffs[:, 2] @ d[0].T
    cz = coeffs[:, 1] @ d[0].T - coeffs[:, 0] @ d[1].T
    return np.stack([cx, cy, cz], axis=1)


def vector_div(coeffs, degree):
    """Divergence of vector polynomials: (n, 3, M) -> (n, M)."""
    return sum(coeffs[:, ax] @ _derivative_matrix(degree, ax).T for ax in range(3))


@lru_cache(maxsize=None)
def _shift_matrix(degree, axis):
    """Multiplication by x_axis as a map into the same degree table.

    Source monomials of top degree map outside the table and must not be
    present in the input; callers embed into a large enough table first.
    """
    exps = monomial_exponents(degree)
    idx = _monomial_index(degree)
    m = exps.shape[0]
    s = np.zeros((m, m))
    for i, e in enumerate(exps):
        tgt = (e[0] + (axis == 0), e[1] + (axis == 1), e[2] + (axis == 2))
        if sum(tgt) <= degree:
            s[idx[tgt], i] = 1.0
    return s


@lru_cache(maxsize=None)
def monomial_mass(degree):
    """Exact Gram matrix of the monomial table over the reference tet."""
    exps = monomial_exponents(degree)
    m = exps.shape[0]
    g = np.empty((m, m))
    for i in range(m):
        for j in range(i + 1):
            e = exps[i] + exps[j]
            g[i, j] = g[j, i] = simplex_monomial_integral(*e)
    return g


@lru_cache(maxsize=None)
def spanning_set(family, degree):
    """Spanning coefficients for P/N/RT vector families over degree+1 table.

    P  : [P_q]^3                    (already a basis)
    N  : [P_q]^3 + x cross H_q e_i  (rank (q+1)(q+3)(q+4)/2)
    RT : [P_q]^3 + x H_q            (already a basis)

    H_q denotes homogeneous scalar monomials of degree exactly q.  Returns
    an (n_span, 3, M) array over the degree (q+1) monomial table.
    """
    q = degree
    table_deg = q + 1
    exps_q = monomial_exponents(q)
    idx = _monomial_index(table_deg)
    m = scalar_dim(table_deg)

    rows = []
    for k in range(exps_q.shape[0]):
        for ax in range(3):
            c = np.zeros((3, m))
            c[ax, idx[tuple(exps_q[k])]] = 1.0
            rows.append(c)

    homog = [tuple(e) for e in exps_q if sum(e) == q]
    if family == "N":
        # x cross (h e_ax): e_x -> (0, z h, -y h); e_y -> (-z h, 0, x h);
        # e_z -> (y h, -x h, 0)
        cross = {0: [(None, 0), (2, 1), (1, -1)],
                 1: [(2, -1), (None, 0), (0, 1)],
                 2: [(1, 1), (0, -1), (None, 0)]}
        for h in homog:
            for ax in range(3):
                c = np.zeros((3, m))
                for comp, (shift_ax, sign) in enumerate(cross[ax]):
                    if shift_ax is None:
                        continue
                    tgt = list(h)
                    tgt[shift_ax] += 1
                    c[comp, idx[tuple(tgt)]] = sign
                rows.append(c)
    elif family == "RT":
        for h in homog:
            c = np.zeros((3, m))
            for ax in range(3):
                tgt = list(h)
                tgt[ax] += 1
                c[ax, idx[tuple(tgt)]] = 1.0
            rows.append(c)
    elif family != "P":
        raise ValueError(f"unknown vector family {family!r}")

    return np.array(rows)


def vector_family_dim(family, degree):
    q = degree
    if family == "N":
        return (q + 1) * (q + 3) * (q + 4) // 2
    if family == "RT":
        return (q + 1) * (q + 2) * (q + 4) // 2
    if family == "P":
        return 3 * scalar_dim(q)
    raise ValueError(f"unknown vector family {family!r}")


# -- 2D helpers for face moment bases ---------------------------------------


@lru_cache(maxsize=None)
def tri_monomial_exponents(degree):
    exps = [
        (a, d - a)
        for d in range(degree + 1)
        for a in range(d, -1, -1)
    ]
    return np.array(exps, dtype=np.int64).reshape(-1, 2)


def tri_dim(degree):
    return (degree + 1) * (degree + 2) // 2


def eval_tri_monomials(degree, pts):
    exps = tri_monomial_exponents(degree)
    pts = np.asarray(pts, dtype=float)
    return np.prod(pts[:, None, :] ** exps[None, :, :], axis=2)


@lru_cache(maxsize=None)
def tri_orthonormal_basis(degree):
    """L2(triangle)-orthonormal scalar basis coefficients over monomials."""
    if degree < 0:
        return np.zeros((0, 0))
    exps = tri_monomial_exponents(degree)
    m = exps.shape[0]
    g = np.empty((m, m))
    for i in range(m):
        for j in range(i + 1):
            e = exps[i] + exps[j]
            g[i, j] = g[j, i] = triangle_monomial_integral(*e)
    w, v = np.linalg.eigh(g)
    return (v / np.sqrt(w)).T


@lru_cache(maxsize=None)
def legendre01_coeffs(nfun):
    """Normalized shifted Legendre polynomials on [0,1].

    Row k holds the power coefficients of sqrt(2k+1) P_k(2t-1) over t^j,
    an L2(0,1)-orthonormal family.  P_k(1-t) parity gives the (-1)^k edge
    flip rule exploited by the orientation transforms.
    """
    from numpy.polynomial import legendre as npleg
    from numpy.polynomial import polynomial as nppoly

    rows = np.zeros((nfun, nfun))
    for k in range(nfun):
        power = npleg.leg2poly(np.eye(k + 1)[k])
        shifted = np.zeros(1)
        for j, a in enumerate(power):
            term = a * nppoly.polypow([-1.0, 2.0], j) if j else np.array([a])
            shifted = nppoly.polyadd(shifted, term)
        rows[k, : shifted.size] = shifted * np.sqrt(2 * k + 1)
    return rows


def eval_legendre01(nfun, t):
    """Values of the normalized shifted Legendre family at t in [0,1]."""
    coeffs = legendre01_coeffs(nfun)
    t = np.asarray(t, dtype=float).ravel()
    powers = t[:, None] ** np.arange(nfun)[None, :]
    return powers @ coeffs.T
