"""Reference-tetrahedron finite element bases with moment degrees of freedom.

Families
--------
P  : discontinuous scalar polynomials, L2-orthonormal basis, cell dofs only
S  : H1-conforming Lagrange-type scalars (vertex values + entity moments)
N  : first-kind Nedelec space x cross [P_q]^3 + [P_q]^3 (H(curl))
RT : Raviart-Thomas space x P_q + [P_q]^3 (H(div))

All degrees of freedom are moments against fixed orthonormal polynomial
families on the entity, parametrized by vertex order.  Two elements sharing
an entity see the same functionals once vertex order is taken ascending in
global indices; the change between the local and the global ordering is a
small per-entity matrix computed once per (family, degree, permutation).

Bases are built once per (family, degree) by inverting the matrix of dofs
applied to an L2-orthonormalized spanning set; unisolvence is therefore a
measurable artifact (see ``dof_condition``).
"""

from dataclasses import dataclass
from functools import lru_cache
from itertools import permutations

import numpy as np

from ..errors import UnsupportedDegreeError
from . import polynomials as poly
from .quadrature import segment_rule, tet_rule, triangle_rule

REF_VERTS = np.array(
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
)
EDGE_VERTS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
FACE_VERTS = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))
PERMS3 = tuple(permutations((0, 1, 2)))

MAX_VECTOR_DEGREE = 5


def edge_moment_count(family, q):
    if family == "N":
        return q + 1
    if family == "S":
        return q - 1
    return 0


def face_moment_count(family, q):
    if family == "N":
        return 2 * poly.tri_dim(q - 1)
    if family == "RT":
        return poly.tri_dim(q)
    if family == "S":
        return poly.tri_dim(q - 3)
    return 0


def cell_moment_count(family, q):
    if family == "N":
        return 3 * poly.scalar_dim(q - 2)
    if family == "RT":
        return 3 * poly.scalar_dim(q - 1)
    if family == "S":
        return poly.scalar_dim(q - 4)
    if family == "P":
        return poly.scalar_dim(q)
    return 0


def vertex_moment_count(family, q):
    return 1 if family == "S" else 0


@lru_cache(maxsize=None)
def tet_orthonormal_scalar(degree):
    """L2(reference tet)-orthonormal scalar basis over the monomial table."""
    if degree < 0:
        return np.zeros((0, 0))
    g = poly.monomial_mass(degree)
    w, v = np.linalg.eigh(g)
    return (v / np.sqrt(w)).T


def _embed_scalar(coeffs, from_deg, to_deg):
    if from_deg == to_deg:
        return coeffs
    out = np.zeros(coeffs.shape[:-1] + (poly.scalar_dim(to_deg),))
    out[..., : poly.scalar_dim(from_deg)] = coeffs
    return out


class _DofTable:
    """Applies the moment functionals of one family/degree.

    ``apply(fn)`` evaluates all dofs on a callable ``fn(points) -> values``
    where values has shape (npts,) for scalar families and (npts, 3) for
    vector ones; points are reference-tet coordinates.
    """

    def __init__(self, family, q):
        self.family = family
        self.q = q
        self.entries = []  # (kind, ent_id, weight fn data)
        rule1 = segment_rule(max(2 * q, 1))
        rule2 = triangle_rule(max(2 * q, 1))
        rule3 = tet_rule(max(2 * q, 1))
        scalar = family in ("P", "S")

        self.dofs = []
        self._pts = []
        self._wts = []  # (npts, 1 or 3) combined quadrature+moment weights

        if vertex_moment_count(family, q):
            for v in range(4):
                self.dofs.append(("vertex", v, 0))
                self._pts.append(REF_VERTS[v][None, :])
                self._wts.append(np.array([[1.0]]))

        nedge = edge_moment_count(family, q)
        if nedge:
            legvals = poly.eval_legendre01(nedge, rule1.points[:, 0])
            for e, (a, b) in enumerate(EDGE_VERTS):
                x = REF_VERTS[a] + rule1.points * (REF_VERTS[b] - REF_VERTS[a])
                tang = REF_VERTS[b] - REF_VERTS[a]
                for k in range(nedge):
                    w = rule1.weights * legvals[:, k]
                    self.dofs.append(("edge", e, k))
                    self._pts.append(x)
                    if scalar:
                        self._wts.append(w[:, None])
                    else:
                        self._wts.append(w[:, None] * tang[None, :])

        nface = face_moment_count(family, q)
        if nface:
            mdeg = {"N": q - 1, "RT": q, "S": q - 3}[family]
            mu = poly.tri_orthonormal_basis(mdeg)
            muvals = poly.eval_tri_monomials(mdeg, rule2.points) @ mu.T
            for f, fv in enumerate(FACE_VERTS):
                w0, w1, w2 = (REF_VERTS[v] for v in fv)
                x = w0 + np.outer(rule2.points[:, 0], w1 - w0) + np.outer(
                    rule2.points[:, 1], w2 - w0
                )
                if family == "N":
                    for i, tau in enumerate((w1 - w0, w2 - w0)):
                        for m in range(muvals.shape[1]):
                            self.dofs.append(("face", f, i * muvals.shape[1] + m))
                            self._pts.append(x)
                            self._wts.append(
                                (rule2.weights * muvals[:, m])[:, None] * tau[None, :]
                            )
                elif family == "RT":
                    nvec = np.cross(w1 - w0, w2 - w0)
                    for m in range(muvals.shape[1]):
                        self.dofs.append(("face", f, m))
                        self._pts.append(x)
                        self._wts.append(
                            (rule2.weights * muvals[:, m])[:, None] * nvec[None, :]
                        )
                else:
                    for m in range(muvals.shape[1]):
                        self.dofs.append(("face", f, m))
                        self._pts.append(x)
                        self._wts.append((rule2.weights * muvals[:, m])[:, None])

        ncell = cell_moment_count(family, q)
        if ncell:
            mdeg = {"N": q - 2, "RT": q - 1, "S": q - 4, "P": q}[family]
            mu = tet_orthonormal_scalar(mdeg)
            muvals = poly.eval_monomials(mdeg, rule3.points) @ mu.T
            nm = muvals.shape[1]
            if scalar:
                for m in range(nm):
                    self.dofs.append(("cell", 0, m))
                    self._pts.append(rule3.points)
                    self._wts.append((rule3.weights * muvals[:, m])[:, None])
            else:
                for ax in range(3):
                    eax = np.eye(3)[ax]
                    for m in range(nm):
                        self.dofs.append(("cell", 0, ax * nm + m))
                        self._pts.append(rule3.points)
                        self._wts.append(
                            (rule3.weights * muvals[:, m])[:, None] * eax[None, :]
                        )

    def apply(self, fn):
        """Row i = dof_i applied to each member of the family fn returns."""
        out = []
        for pts, wts in zip(self._pts, self._wts):
            vals = fn(pts)  # (nfun, npts) or (nfun, npts, 3)
            if wts.shape[1] == 1 and vals.ndim == 2:
                out.append(vals @ wts[:, 0])
            else:
                out.append(np.einsum("npc,pc->n", vals, wts))
        return np.array(out)


@dataclass
class ReferenceBasis:
    """A nodal reference basis: coefficients over the monomial table."""

    family: str
    degree: int
    dim: int
    table_degree: int
    coeffs: np.ndarray  # (n, M) scalar or (n, 3, M) vector
    dofs: list  # (kind, ent_id, moment)
    dof_condition: float

    @property
    def is_scalar(self):
        return self.family in ("P", "S")

    def slots(self, kind, ent_id):
        return np.array(
            [i for i, d in enumerate(self.dofs) if d[0] == kind and d[1] == ent_id],
            dtype=np.int64,
        )

    # -- evaluation ----------------------------------------------------------

    def values(self, pts):
        mono = poly.eval_monomials(self.table_degree, pts)
        if self.is_scalar:
            return self.coeffs @ mono.T  # (n, npts)
        return np.einsum("ncm,pm->npc", self.coeffs, mono)

    def gradients(self, pts):
        g = poly.scalar_gradient(self.coeffs, self.table_degree)
        mono = poly.eval_monomials(self.table_degree, pts)
        return np.einsum("ncm,pm->npc", g, mono)

    def curls(self, pts):
        c = poly.vector_curl(self.coeffs, self.table_degree)
        mono = poly.eval_monomials(self.table_degree, pts)
        return np.einsum("ncm,pm->npc", c, mono)

    def divs(self, pts):
        d = poly.vector_div(self.coeffs, self.table_degree)
        mono = poly.eval_monomials(self.table_degree, pts)
        return d @ mono.T


def _orthonormal_span(family, q):
    """L2-orthonormal basis of the family span; rank cut at the known dim."""
    if family in ("P", "S"):
        return tet_orthonormal_scalar(q), q
    span = poly.spanning_set(family, q)
    table_deg = q + 1
    mass = poly.monomial_mass(table_deg)
    flat = span.reshape(span.shape[0], -1)
    gram = np.einsum("icm,mn,jcn->ij", span, mass, span)
    w, v = np.linalg.eigh(gram)
    n = poly.vector_family_dim(family, q)
    if n < w.size and w[-n] < 1e8 * w[-n - 1]:
        raise RuntimeError(
            f"rank gap too small orthonormalizing {family}_{q}: "
            f"{w[-n - 1]:.3e} vs {w[-n]:.3e}"
        )
    keep = v[:, -n:] / np.sqrt(w[-n:])
    onb = (keep.T @ flat).reshape(n, 3, -1)
    return onb, table_deg


@lru_cache(maxsize=None)
def get_reference(family, degree):
    """Nodal reference basis for the family/degree, built once and cached."""
    q = degree
    if family in ("N", "RT"):
        if not 0 <= q <= MAX_VECTOR_DEGREE:
            raise UnsupportedDegreeError(
                f"{family} degree must be in 0..{MAX_VECTOR_DEGREE}, got {q}"
            )
    elif family == "S":
        if q < 1:
            raise UnsupportedDegreeError(f"S degree must be >= 1, got {q}")
    elif family == "P":
        if q < 0:
            raise UnsupportedDegreeError(f"P degree must be >= 0, got {q}")
    else:
        raise ValueError(f"unknown family {family!r}")

    onb, table_deg = _orthonormal_span(family, q)
    dt = _DofTable(family, q)

    if family == "P":
        # L2-orthonormal basis doubles as the nodal basis: dofs are the
        # moments against itself, so the dof matrix is the identity.
        return ReferenceBasis("P", q, onb.shape[0], table_deg, onb, dt.dofs, 1.0)

    if family == "S":
        def evaluate(pts):
            return onb @ poly.eval_monomials(table_deg, pts).T
    else:
        def evaluate(pts):
            return np.einsum(
                "ncm,pm->npc", onb, poly.eval_monomials(table_deg, pts)
            )

    dmat = dt.apply(evaluate)
    cond = np.linalg.cond(dmat)
    nodal = np.linalg.solve(dmat, np.eye(dmat.shape[0]))
    coeffs = np.einsum("jn,j...->n...", nodal, onb)
    return ReferenceBasis(family, q, onb.shape[0], table_deg, coeffs, dt.dofs, cond)


# -- orientation transforms ---------------------------------------------------


def _edge_probe(q):
    def fn(tpts):
        return tpts[:, None] ** np.arange(q + 1)[None, :]

    return fn


@lru_cache(maxsize=None)
def edge_flip_matrix(family, q):
    """T with dof^flipped = T @ dof^reference for one edge's moments.

    The flipped functional set parametrizes the edge from the opposite end
    and negates the tangent for vector families.
    """
    n = edge_moment_count(family, q)
    if n == 0:
        return np.zeros((0, 0))
    rule = segment_rule(2 * (q + 1))
    t = rule.points[:, 0]
    legv = poly.eval_legendre01(n, t)
    legv_f = poly.eval_legendre01(n, 1.0 - t)
    # probe scalar family u_b(t) = t^b; tangential factor is +-1
    probe = t[:, None] ** np.arange(q + 2)[None, :]
    sign = -1.0 if family in ("N", "RT") else 1.0
    f_ref = legv.T * rule.weights @ probe
    f_can = sign * (legv_f.T * rule.weights) @ probe
    tmat, *_ = np.linalg.lstsq(f_ref.T, f_can.T, rcond=None)
    return tmat.T


@lru_cache(maxsize=None)
def face_perm_matrix(family, q, perm_id):
    """T with dof^permuted = T @ dof^reference for one face's moments.

    ``perm_id`` indexes PERMS3; the permuted functionals order the face
    vertices as (w_p0, w_p1, w_p2) instead of (w_0, w_1, w_2).
    """
    n = face_moment_count(family, q)
    if n == 0:
        return np.zeros((0, 0))
    perm = PERMS3[perm_id]
    # fixed 2D reference face: vertices in R^2
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    rule = triangle_rule(2 * (q + 1))
    pdeg = q + 1
    nprobe = poly.tri_dim(pdeg)

    def functionals(order):
        w0, w1, w2 = (verts[i] for i in order)
        t1, t2 = w1 - w0, w2 - w0
        x = w0 + np.outer(rule.points[:, 0], t1) + np.outer(rule.points[:, 1], t2)
        # coordinates of x in the reference chart (w0=origin)
        st = x  # reference chart IS the identity on these verts
        probev = poly.eval_tri_monomials(pdeg, st)  # (npts, nprobe)
        rows = []
        if family == "N":
            mu = poly.tri_orthonormal_basis(q - 1)
            muv = poly.eval_tri_monomials(q - 1, rule.points) @ mu.T
            for tau in (t1, t2):
                for m in range(muv.shape[1]):
                    w = rule.weights * muv[:, m]
                    # probe functions e_alpha sigma_b with e in R^2 plus a
                    # third component that face moments never see; the
                    # in-plane components suffice for the row space.
                    rows.append(
                        np.concatenate(
                            [w @ (probev * tau[d]) for d in range(2)]
                        )
                    )
        elif family == "RT":
            zn = t1[0] * t2[1] - t1[1] * t2[0]  # scalar normal component
            mu = poly.tri_orthonormal_basis(q)
            muv = poly.eval_tri_monomials(q, rule.points) @ mu.T
            for m in range(muv.shape[1]):
                w = rule.weights * muv[:, m]
                rows.append(zn * (w @ probev))
        else:  # S
            mu = poly.tri_orthonormal_basis(q - 3)
            muv = poly.eval_tri_monomials(q - 3, rule.points) @ mu.T
            for m in range(muv.shape[1]):
                w = rule.weights * muv[:, m]
                rows.append(w @ probev)
        return np.array(rows).reshape(len(rows), -1)

    f_ref = functionals((0, 1, 2))
    f_can = functionals(perm)
    tmat, res, *_ = np.linalg.lstsq(f_ref.T, f_can.T, rcond=None)
    return tmat.T


@lru_cache(maxsize=None)
def _orientation_blocks(family, q):
    ref = get_reference(family, q)
    edge_slots = [ref.slots("edge", e) for e in range(6)]
    face_slots = [ref.slots("face", f) for f in range(4)]
    return ref, edge_slots, face_slots


@lru_cache(maxsize=None)
def _inv_edge_flip(family, q):
    m = edge_flip_matrix(family, q)
    return np.linalg.inv(m) if m.size else m


@lru_cache(maxsize=None)
def _inv_face_perm(family, q, perm_id):
    m = face_perm_matrix(family, q, perm_id)
    return np.linalg.inv(m) if m.size else m


@lru_cache(maxsize=None)
def orientation_matrix(family, q, edge_flips, face_perms):
    """C = T^{-1} mapping reference nodal coefficients to the basis dual to
    globally oriented functionals; apply as phys = C.T @ ref combinations.

    ``edge_flips`` is a 6-tuple of bools, ``face_perms`` a 4-tuple of
    PERMS3 indices.  Cached per pattern; meshes expose only a handful.
    """
    ref, edge_slots, face_slots = _orientation_blocks(family, q)
    c = np.eye(ref.dim)
    for e in range(6):
        if edge_flips[e] and edge_slots[e].size:
            c[np.ix_(edge_slots[e], edge_slots[e])] = _inv_edge_flip(family, q)
    for f in range(4):
        if face_perms[f] != 0 and face_slots[f].size:
            c[np.ix_(face_slots[f], face_slots[f])] = _inv_face_perm(
                family, q, face_perms[f]
            )
    return c


@lru_cache(maxsize=None)
def orientation_matrix_forward(family, q, edge_flips, face_perms):
    """T with canonical dofs = T @ reference dofs (inverse of C)."""
    ref, edge_slots, face_slots = _orientation_blocks(family, q)
    t = np.eye(ref.dim)
    for e in range(6):
        if edge_flips[e] and edge_slots[e].size:
            t[np.ix_(edge_slots[e], edge_slots[e])] = edge_flip_matrix(family, q)
    for f in range(4):
        if face_perms[f] != 0 and face_slots[f].size:
            t[np.ix_(face_slots[f], face_slots[f])] = face_perm_matrix(
                family, q, face_perms[f]
            )
    return t


def tet_orientation(global_ids):
    """Edge flips and face permutation ids for a tet's global vertex ids."""
    g = np.asarray(global_ids)
    flips = tuple(bool(g[a] > g[b]) for a, b in EDGE_VERTS)
    perms = []
    for fv in FACE_VERTS:
        trio = [g[v] for v in fv]
        order = tuple(int(i) for i in np.argsort(trio))
        perms.append(PERMS3.index(order))
    return flips, tuple(perms)
