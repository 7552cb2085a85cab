"""Reference-element moment tensors.

All element matrices in the package are affine images of a handful of
reference integrals, so these tensors are computed once per family/degree
pair with quadrature of exactly sufficient degree and cached.  Geometry
(Jacobians) and material tensors enter later as small 3x3 contractions,
which keeps every constraint row exact to rounding.
"""

from functools import lru_cache

import numpy as np

from .quadrature import tet_rule
from .reference import get_reference, tet_orthonormal_scalar
from . import polynomials as poly

_VALUE_DEGREE = {"N": lambda q: q + 1, "RT": lambda q: q + 1,
                 "P": lambda q: q, "S": lambda q: q}
_DERIV_DEGREE = {"N": lambda q: q, "RT": lambda q: q,
                 "P": lambda q: q - 1, "S": lambda q: q - 1}


def value_degree(family, q):
    return _VALUE_DEGREE[family](q)


@lru_cache(maxsize=None)
def ref_tables(family, q, quad_degree):
    """Reference basis tables at the tet rule of the given degree."""
    ref = get_reference(family, q)
    rule = tet_rule(quad_degree)
    pts = rule.points
    out = {"rule": rule}
    out["values"] = ref.values(pts)
    if family == "N":
        out["curls"] = ref.curls(pts)
    elif family == "RT":
        out["divs"] = ref.divs(pts)
    else:
        out["gradients"] = ref.gradients(pts)
    return out


def _hat_values(rule):
    """Barycentric coordinates of the reference tet at quadrature points."""
    pts = rule.points
    lam0 = 1.0 - pts.sum(axis=1)
    return np.column_stack([lam0, pts])  # (npts, 4)


@lru_cache(maxsize=None)
def vv_blocks(famA, qA, famB, qB):
    """(3,3,nA,nB) componentwise value-value integrals."""
    deg = value_degree(famA, qA) + value_degree(famB, qB)
    ta = ref_tables(famA, qA, deg)
    tb = ref_tables(famB, qB, deg)
    w = ta["rule"].weights
    return np.einsum("ipa,jpb,p->abij", ta["values"], tb["values"], w)


@lru_cache(maxsize=None)
def vv_hat_blocks(famA, qA, famB, qB):
    """(4,3,3,nA,nB) value-value integrals with a barycentric factor."""
    deg = value_degree(famA, qA) + value_degree(famB, qB) + 1
    ta = ref_tables(famA, qA, deg)
    tb = ref_tables(famB, qB, deg)
    w = ta["rule"].weights
    lam = _hat_values(ta["rule"])
    return np.einsum("ipa,jpb,pv,p->vabij", ta["values"], tb["values"], lam, w)


@lru_cache(maxsize=None)
def curlcurl_blocks(qA, qB):
    """(3,3,nA,nB) curl-curl integrals for Nedelec bases."""
    deg = qA + qB
    ta = ref_tables("N", qA, deg)
    tb = ref_tables("N", qB, deg)
    w = ta["rule"].weights
    return np.einsum("ipa,jpb,p->abij", ta["curls"], tb["curls"], w)


@lru_cache(maxsize=None)
def gradgrad_blocks(qA, qB):
    """(3,3,nA,nB) grad-grad integrals for scalar H1 bases."""
    deg = qA + qB - 2
    ta = ref_tables("S", qA, max(deg, 0))
    tb = ref_tables("S", qB, max(deg, 0))
    w = ta["rule"].weights
    return np.einsum("ipa,jpb,p->abij", ta["gradients"], tb["gradients"], w)


@lru_cache(maxsize=None)
def val_grad_blocks(famA, qA, qS):
    """(3,3,nA,nS) vector value vs scalar gradient integrals."""
    deg = value_degree(famA, qA) + qS - 1
    ta = ref_tables(famA, qA, deg)
    tb = ref_tables("S", qS, deg)
    w = ta["rule"].weights
    return np.einsum("ipa,jpb,p->abij", ta["values"], tb["gradients"], w)


@lru_cache(maxsize=None)
def curl_val_blocks(qN, famB, qB):
    """(3,3,nN,nB) Nedelec curl vs vector value integrals."""
    deg = qN + value_degree(famB, qB)
    ta = ref_tables("N", qN, deg)
    tb = ref_tables(famB, qB, deg)
    w = ta["rule"].weights
    return np.einsum("ipa,jpb,p->abij", ta["curls"], tb["values"], w)


@lru_cache(maxsize=None)
def div_p_moments(q_rt, r):
    """(nRT, nP) integrals of div(RT basis) against the orthonormal P_r."""
    deg = q_rt + r
    ta = ref_tables("RT", q_rt, deg)
    tb = ref_tables("P", r, deg)
    w = ta["rule"].weights
    return np.einsum("ip,jp,p->ij", ta["divs"], tb["values"], w)


@lru_cache(maxsize=None)
def val_p_moments(fam, q, r):
    """(3, n, nP) integrals of each value component against P_r."""
    deg = value_degree(fam, q) + r
    ta = ref_tables(fam, q, deg)
    tb = ref_tables("P", r, deg)
    w = ta["rule"].weights
    return np.einsum("ipa,jp,p->aij", ta["values"], tb["values"], w)


@lru_cache(maxsize=None)
def val_p_hat_moments(fam, q, r):
    """(4, 3, n, nP) value components against P_r with a barycentric factor."""
    deg = value_degree(fam, q) + r + 1
    ta = ref_tables(fam, q, deg)
    tb = ref_tables("P", r, deg)
    w = ta["rule"].weights
    lam = _hat_values(ta["rule"])
    return np.einsum("ipa,jp,pv,p->vaij", ta["values"], tb["values"], lam, w)


@lru_cache(maxsize=None)
def div_p_hat_moments(q_rt, r):
    """(4, nRT, nP) div(RT) against P_r with a barycentric factor."""
    deg = q_rt + r + 1
    ta = ref_tables("RT", q_rt, deg)
    tb = ref_tables("P", r, deg)
    w = ta["rule"].weights
    lam = _hat_values(ta["rule"])
    return np.einsum("ip,jp,pv,p->vij", ta["divs"], tb["values"], lam, w)


@lru_cache(maxsize=None)
def component_integrals(fam, q):
    """(n, 3) integral of each basis component over the reference tet."""
    deg = value_degree(fam, q)
    ta = ref_tables(fam, q, deg)
    w = ta["rule"].weights
    return np.einsum("ipa,p->ia", ta["values"], w)


@lru_cache(maxsize=None)
def dof_embedding(fam, q_to, fam_from, q_from, hat_vertex=None):
    """(n_to, n_from) reference dofs of the target applied to source basis.

    With ``hat_vertex`` the source basis is multiplied by the barycentric
    coordinate of that local vertex first (still polynomial, still exact).
    Used to re-express fields like psi^a J_h exactly in a larger space.
    Valid between families sharing a pullback (N/N, RT/RT and hat variants).
    """
    from .reference import _DofTable

    src = get_reference(fam_from, q_from)
    dt = _DofTable(fam, q_to)
    lam_vert = hat_vertex

    def evaluate(pts):
        vals = src.values(pts)
        if lam_vert is not None:
            pts = np.asarray(pts)
            lam = (
                1.0 - pts.sum(axis=1)
                if lam_vert == 0
                else pts[:, lam_vert - 1]
            )
            vals = vals * lam[None, :, None]
        return vals

    return dt.apply(evaluate)


@lru_cache(maxsize=None)
def curl_component_integrals(q_n):
    """(n, 3) integral of each Nedelec basis curl over the reference tet."""
    ta = ref_tables("N", q_n, q_n)
    return np.einsum("ipa,p->ia", ta["curls"], ta["rule"].weights)


@lru_cache(maxsize=None)
def val_curl_hat_diag(q_a, q_b):
    """(4, nA, nB) sum_al of int valA_al curlB_al lambda_v; geometry-free
    pairing of a covariant field against a curl (contravariant) field."""
    deg = value_degree("N", q_a) + q_b + 1
    ta = ref_tables("N", q_a, deg)
    tb = ref_tables("N", q_b, deg)
    w = ta["rule"].weights
    lam = _hat_values(ta["rule"])
    return np.einsum("ipa,jpa,pv,p->vij", ta["values"], tb["curls"], lam, w)


@lru_cache(maxsize=None)
def grad_curl_hat_diag(q_s, q_n):
    """(4, nS, nN) sum_al of int gradS_al curlN_al lambda_v."""
    deg = (q_s - 1) + q_n + 1
    ta = ref_tables("S", q_s, deg)
    tb = ref_tables("N", q_n, deg)
    w = ta["rule"].weights
    lam = _hat_values(ta["rule"])
    return np.einsum("ipa,jpa,pv,p->vij", ta["gradients"], tb["curls"], lam, w)


@lru_cache(maxsize=None)
def vv_diag_hat(fam_a, q_a, fam_b, q_b):
    """(4, nA, nB) sum_al of int valA_al valB_al lambda_v (cov x contra)."""
    return np.einsum("vaaij->vij", vv_hat_blocks(fam_a, q_a, fam_b, q_b))


@lru_cache(maxsize=None)
def zero_mean_split(r):
    """Rows expressing {constant, orthonormal zero-mean family} in P_r ONB.

    Returns (gamma, zrows): gamma[k] = integral of the k-th orthonormal
    basis function (so gamma @ c gives the mean-part integral of a field
    with ONB coefficients c), and zrows an (nP-1, nP) orthonormal basis of
    the zero-mean complement.
    """
    import scipy.linalg as sla

    onb = tet_orthonormal_scalar(r)
    exps = poly.monomial_exponents(r)
    from .quadrature import simplex_monomial_integral

    ints = np.array([simplex_monomial_integral(*e) for e in exps])
    gamma = onb @ ints
    zrows = sla.null_space(gamma[None, :]).T
    return gamma, zrows


@lru_cache(maxsize=None)
def curl_dof_embedding(q_rt, q_n):
    """(nRT, nN) RT reference dofs applied to curls of the N basis.

    The curl of a covariant field pulls back contravariantly, so these are
    exactly the physical RT dofs of curl(v) up to orientation transforms.
    """
    from .reference import _DofTable

    src = get_reference("N", q_n)
    dt = _DofTable("RT", q_rt)
    return dt.apply(src.curls)


@lru_cache(maxsize=None)
def grad_dof_embedding(q_n, q_s):
    """(nN, nS) Nedelec reference dofs applied to gradients of the S basis.

    Gradients pull back covariantly like the Nedelec basis itself, so the
    physical-dof embedding of grad(s) needs only orientation transforms.
    """
    from .reference import _DofTable

    src = get_reference("S", q_s)
    dt = _DofTable("N", q_n)
    return dt.apply(src.gradients)
