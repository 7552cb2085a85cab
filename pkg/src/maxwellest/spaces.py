"""Conforming finite element spaces on (sub)meshes.

A Space numbers degrees of freedom entity-by-entity (vertices, edges,
faces, cells) for the elements it covers, with every functional defined in
the global orientation convention of the mesh.  Element bases are the
reference nodal bases combined with a per-element orientation matrix, so
shared entities automatically receive identical functionals from both
sides and no global sign tables are needed.

Constrained dofs (essential traces) stay in the numbering with their
coefficients pinned to zero; assembly and solves act on the free subset.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import SolverFailure, UnsupportedDegreeError
from .fembasis import polynomials as poly
from .fembasis import tensors
from .fembasis.quadrature import segment_rule, tet_rule, triangle_rule
from .fembasis.reference import (
    edge_moment_count,
    face_moment_count,
    cell_moment_count,
    vertex_moment_count,
    get_reference,
    orientation_matrix,
    orientation_matrix_forward,
)

_SUPPORTED = {"N": range(0, 6), "RT": range(0, 6), "S": range(1, 10), "P": range(0, 10)}


# -- shared per-mesh geometry -------------------------------------------------


def mesh_geometry(topo):
    """Stacked Jacobian data for every tet, cached on the topology object."""
    geo = getattr(topo, "_geometry", None)
    if geo is None:
        v = topo.mesh.vertices[topo.mesh.tets]
        B = np.swapaxes(v[:, 1:] - v[:, :1], 1, 2)
        det = np.linalg.det(B)
        geo = {
            "B": B,
            "Binv": np.linalg.inv(B),
            "det": det,
            "origin": v[:, 0],
            "verts": v,
        }
        topo._geometry = geo
    return geo


def orientation_patterns(topo):
    """Unique (edge_flips, face_perms) patterns and the per-tet pattern id."""
    pats = getattr(topo, "_patterns", None)
    if pats is None:
        key = np.concatenate(
            [topo.edge_flips.astype(np.int8), topo.face_perms.astype(np.int8)], axis=1
        )
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        patterns = [
            (tuple(bool(x) for x in row[:6]), tuple(int(x) for x in row[6:]))
            for row in uniq
        ]
        pats = (patterns, inv)
        topo._patterns = pats
    return pats


def face_edges(topo):
    """(F, 3) edge ids of each face, cached."""
    fe = getattr(topo, "_face_edges", None)
    if fe is None:
        f = topo.faces
        pairs = np.sort(f[:, [[0, 1], [0, 2], [1, 2]]].reshape(-1, 2), axis=1)
        nv = topo.mesh.nvertices + 1
        ekey = topo.edges[:, 0] * nv + topo.edges[:, 1]
        fe = np.searchsorted(ekey, pairs[:, 0] * nv + pairs[:, 1]).reshape(-1, 3)
        topo._face_edges = fe
    return fe


# -- space --------------------------------------------------------------------


@dataclass
class Space:
    """Conforming FE space over a set of tets with optional trace constraints."""

    family: str
    degree: int
    topo: object
    tets: np.ndarray
    vert_ids: np.ndarray
    edge_ids: np.ndarray
    face_ids: np.ndarray
    ndof: int
    elem_dofs: np.ndarray
    constrained: np.ndarray
    offsets: dict
    pattern_of: np.ndarray = field(repr=False, default=None)

    @property
    def nfree(self):
        return int((~self.constrained).sum())

    @property
    def free_index(self):
        return np.nonzero(~self.constrained)[0]

    def zeros(self):
        return DiscreteField(self, np.zeros(self.ndof, dtype=complex))

    def orientation(self, pattern_id, forward=False):
        patterns, _ = orientation_patterns(self.topo)
        flips, perms = patterns[pattern_id]
        fn = orientation_matrix_forward if forward else orientation_matrix
        return fn(self.family, self.degree, flips, perms)

    def elem_pattern_groups(self):
        """Element indices (into self.tets) grouped by orientation pattern."""
        groups = {}
        for i, p in enumerate(self.pattern_of):
            groups.setdefault(int(p), []).append(i)
        return {p: np.array(ix, dtype=np.int64) for p, ix in groups.items()}

    def geometry(self):
        geo = mesh_geometry(self.topo)
        t = self.tets
        return {k: v[t] for k, v in geo.items()}

    def ref_coeff_matrix(self):
        """(nel, nloc, nloc) stack of orientation matrices C per element."""
        n = self.elem_dofs.shape[1]
        out = np.empty((self.tets.size, n, n))
        for p, ix in self.elem_pattern_groups().items():
            out[ix] = self.orientation(p)
        return out

    def gather(self, coeffs):
        """Per-element canonical dof values, shape (nel, nloc)."""
        return np.asarray(coeffs)[self.elem_dofs]


@dataclass
class DiscreteField:
    """Complex coefficient vector over a Space (constrained dofs pinned)."""

    space: Space
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        if self.coeffs.shape != (self.space.ndof,):
            raise ValueError(
                f"coefficient length {self.coeffs.shape} != ndof {self.space.ndof}"
            )

    def copy(self):
        return DiscreteField(self.space, self.coeffs.copy())


@dataclass
class SystemMatrix:
    """Sparse system over the free dofs of a space (complex symmetric form)."""

    matrix: sp.csr_matrix
    space: Space
    symmetric: bool = True


def _entity_closure(topo, faces):
    """Vertices and edges belonging to the given faces."""
    verts = np.unique(topo.faces[faces])
    edges = np.unique(face_edges(topo)[faces])
    return verts, edges


def build_space(topo, family, degree, constraint=None, tets=None):
    """Create a conforming space.

    ``constraint`` is None, a string kind applied on the domain boundary
    ('tangential' for H0(curl), 'normal' for H0(div), 'trace' for H1_0), or
    a tuple (kind, face_ids) restricting the essential condition to a face
    set (as needed by the patch spaces).  ``tets`` restricts the space to a
    submesh (default: all elements).
    """
    if degree not in _SUPPORTED.get(family, ()):
        raise UnsupportedDegreeError(f"unsupported family/degree {family}_{degree}")
    mesh = topo.mesh
    if tets is None:
        tets = np.arange(mesh.ntets, dtype=np.int64)
    else:
        tets = np.asarray(tets, dtype=np.int64)

    nv = vertex_moment_count(family, degree)
    ne = edge_moment_count(family, degree)
    nf = face_moment_count(family, degree)
    nc = cell_moment_count(family, degree)

    vert_ids = np.unique(mesh.tets[tets]) if nv else np.empty(0, np.int64)
    edge_ids = np.unique(topo.tet2edge[tets]) if ne else np.empty(0, np.int64)
    face_ids = np.unique(topo.tet2face[tets]) if nf else np.empty(0, np.int64)

    off_v = 0
    off_e = off_v + nv * vert_ids.size
    off_f = off_e + ne * edge_ids.size
    off_c = off_f + nf * face_ids.size
    ndof = off_c + nc * tets.size
    offsets = {"vertex": off_v, "edge": off_e, "face": off_f, "cell": off_c}

    nel = tets.size
    blocks = []
    if nv:
        vloc = np.searchsorted(vert_ids, mesh.tets[tets])  # (nel, 4)
        blocks.append(off_v + (vloc[:, :, None] * nv + np.arange(nv)).reshape(nel, -1))
    if ne:
        eloc = np.searchsorted(edge_ids, topo.tet2edge[tets])
        blocks.append(off_e + (eloc[:, :, None] * ne + np.arange(ne)).reshape(nel, -1))
    if nf:
        floc = np.searchsorted(face_ids, topo.tet2face[tets])
        blocks.append(off_f + (floc[:, :, None] * nf + np.arange(nf)).reshape(nel, -1))
    if nc:
        cloc = np.arange(nel)
        blocks.append(off_c + (cloc[:, None] * nc + np.arange(nc)).reshape(nel, -1))
    elem_dofs = np.concatenate(blocks, axis=1) if blocks else np.empty((nel, 0), np.int64)

    constrained = np.zeros(ndof, dtype=bool)
    if constraint is not None:
        if isinstance(constraint, str):
            kind, faces = constraint, None
        else:
            kind, faces = constraint
        if faces is None:
            faces = np.nonzero(topo.face_boundary)[0]
        faces = np.asarray(faces, dtype=np.int64)
        if kind not in ("tangential", "normal", "trace"):
            raise ValueError(f"unknown constraint kind {kind!r}")
        if kind == "normal" and family != "RT":
            raise ValueError("normal constraints apply to RT spaces")
        if kind == "tangential" and family != "N":
            raise ValueError("tangential constraints apply to N spaces")
        if kind == "trace" and family != "S":
            raise ValueError("trace constraints apply to S spaces")
        if nf:
            floc = np.searchsorted(face_ids, faces)
            present = face_ids[np.minimum(floc, face_ids.size - 1)] == faces
            fl = floc[present]
            constrained[(off_f + fl[:, None] * nf + np.arange(nf)).ravel()] = True
        if kind in ("tangential", "trace"):
            cverts, cedges = _entity_closure(topo, faces)
            if ne:
                eloc = np.searchsorted(edge_ids, cedges)
                present = edge_ids[np.minimum(eloc, edge_ids.size - 1)] == cedges
                el = eloc[present]
                constrained[(off_e + el[:, None] * ne + np.arange(ne)).ravel()] = True
            if nv:
                vloc = np.searchsorted(vert_ids, cverts)
                present = vert_ids[np.minimum(vloc, vert_ids.size - 1)] == cverts
                vl = vloc[present]
                constrained[(off_v + vl[:, None] * nv + np.arange(nv)).ravel()] = True

    _, pattern_inv = orientation_patterns(topo)
    return Space(
        family=family,
        degree=degree,
        topo=topo,
        tets=tets,
        vert_ids=vert_ids,
        edge_ids=edge_ids,
        face_ids=face_ids,
        ndof=ndof,
        elem_dofs=elem_dofs,
        constrained=constrained,
        offsets=offsets,
        pattern_of=pattern_inv[tets],
    )


def dof_injection(sub, glob):
    """Map sub-space dof ids to ids in a space on the same topology/family."""
    if (sub.family, sub.degree) != (glob.family, glob.degree):
        raise ValueError("dof injection requires matching family and degree")
    out = np.empty(sub.ndof, dtype=np.int64)
    for kind, ids_sub, ids_glob, n in (
        ("vertex", sub.vert_ids, glob.vert_ids, vertex_moment_count(sub.family, sub.degree)),
        ("edge", sub.edge_ids, glob.edge_ids, edge_moment_count(sub.family, sub.degree)),
        ("face", sub.face_ids, glob.face_ids, face_moment_count(sub.family, sub.degree)),
    ):
        if n == 0 or ids_sub.size == 0:
            continue
        loc = np.searchsorted(ids_glob, ids_sub)
        if not np.array_equal(ids_glob[loc], ids_sub):
            raise ValueError("sub-space entities missing from target space")
        base = (glob.offsets[kind] + loc[:, None] * n + np.arange(n)).ravel()
        out[sub.offsets[kind] : sub.offsets[kind] + ids_sub.size * n] = base
    nc = cell_moment_count(sub.family, sub.degree)
    if nc:
        loc = np.searchsorted(glob.tets, sub.tets)
        if not np.array_equal(glob.tets[loc], sub.tets):
            raise ValueError("sub-space elements missing from target space")
        base = (glob.offsets["cell"] + loc[:, None] * nc + np.arange(nc)).ravel()
        out[sub.offsets["cell"] :] = base
    return out


# -- evaluation ---------------------------------------------------------------


def element_values(space, coeffs, ref_pts, eids=None, what=("values",)):
    """Evaluate a coefficient vector on elements at shared reference points.

    Returns a dict of arrays shaped (nel, npts, 3) for vector quantities or
    (nel, npts) for scalar ones.  ``eids`` indexes into space.tets.
    """
    if eids is None:
        eids = np.arange(space.tets.size)
    ref = get_reference(space.family, space.degree)
    geo = mesh_geometry(space.topo)
    tets = space.tets[eids]
    cloc = np.asarray(coeffs)[space.elem_dofs[eids]]  # (nel, nloc)
    # to reference-nodal coordinates
    chat = np.empty_like(cloc)
    pgroups = {}
    for i, p in zip(range(len(eids)), space.pattern_of[eids]):
        pgroups.setdefault(int(p), []).append(i)
    for p, ix in pgroups.items():
        c = space.orientation(p)
        chat[ix] = cloc[ix] @ c.T

    out = {}
    fam = space.family
    if "values" in what:
        vhat = ref.values(ref_pts) if not ref.is_scalar else ref.values(ref_pts)
        if ref.is_scalar:
            out["values"] = np.einsum("el,lp->ep", chat, vhat)
        else:
            tmp = np.einsum("el,lpc->epc", chat, vhat)
            if fam == "N":
                out["values"] = np.einsum("edc,epc->epd", np.swapaxes(geo["Binv"][tets], 1, 2), tmp)
            elif fam == "RT":
                out["values"] = (
                    np.einsum("edc,epc->epd", geo["B"][tets], tmp)
                    / geo["det"][tets][:, None, None]
                )
            else:
                out["values"] = tmp
    if "curls" in what and fam == "N":
        tmp = np.einsum("el,lpc->epc", chat, ref.curls(ref_pts))
        out["curls"] = (
            np.einsum("edc,epc->epd", geo["B"][tets], tmp)
            / geo["det"][tets][:, None, None]
        )
    if "divs" in what and fam == "RT":
        tmp = np.einsum("el,lp->ep", chat, ref.divs(ref_pts))
        out["divs"] = tmp / geo["det"][tets][:, None]
    if "gradients" in what and fam in ("S", "P"):
        tmp = np.einsum("el,lpc->epc", chat, ref.gradients(ref_pts))
        out["gradients"] = np.einsum(
            "edc,epc->epd", np.swapaxes(geo["Binv"][tets], 1, 2), tmp
        )
    return out


def eval_at_points(space, coeffs, eids, ref_pts, what=("values",)):
    """Evaluate on elements at per-element reference points.

    ``ref_pts`` has shape (nel, npts, 3) with a separate point set per
    element (used for two-sided face sampling).  Returns arrays shaped
    like :func:`element_values`.
    """
    eids = np.asarray(eids)
    nel, npts = ref_pts.shape[:2]
    ref = get_reference(space.family, space.degree)
    geo = mesh_geometry(space.topo)
    tets = space.tets[eids]
    cloc = np.asarray(coeffs)[space.elem_dofs[eids]]
    chat = np.empty_like(cloc)
    pgroups = {}
    for i, p in enumerate(space.pattern_of[eids]):
        pgroups.setdefault(int(p), []).append(i)
    for p, ix in pgroups.items():
        chat[ix] = cloc[ix] @ space.orientation(p).T
    flat = ref_pts.reshape(-1, 3)
    out = {}
    if "values" in what:
        vhat = ref.values(flat)
        if ref.is_scalar:
            out["values"] = np.einsum(
                "el,lep->ep", chat, vhat.reshape(-1, nel, npts)
            )
        else:
            v = vhat.reshape(-1, nel, npts, 3)
            tmp = np.einsum("el,lepc->epc", chat, v)
            if space.family == "N":
                out["values"] = np.einsum(
                    "edc,epc->epd", np.swapaxes(geo["Binv"][tets], 1, 2), tmp
                )
            elif space.family == "RT":
                out["values"] = (
                    np.einsum("edc,epc->epd", geo["B"][tets], tmp)
                    / geo["det"][tets][:, None, None]
                )
            else:
                out["values"] = tmp
    if "curls" in what and space.family == "N":
        c = ref.curls(flat).reshape(-1, nel, npts, 3)
        tmp = np.einsum("el,lepc->epc", chat, c)
        out["curls"] = (
            np.einsum("edc,epc->epd", geo["B"][tets], tmp)
            / geo["det"][tets][:, None, None]
        )
    return out


def eval_field(u, K, ref_pts):
    """Values plus the family's derivative of a field on one element.

    ``K`` indexes into the space's element list; ``ref_pts`` are points in
    the reference tetrahedron (the preimage of physical points under the
    element map).
    """
    what = {"N": ("values", "curls"), "RT": ("values", "divs")}.get(
        u.space.family, ("values", "gradients")
    )
    res = element_values(u.space, u.coeffs, np.asarray(ref_pts, float), np.array([K]), what)
    return {k: v[0] for k, v in res.items()}


# -- interpolation ------------------------------------------------------------


def interpolate(space, fn, fdeg=8):
    """Canonical-dof interpolant of an analytic vector field.

    The moments are computed with quadrature exact for polynomials of
    degree ``degree + fdeg`` on every entity, with the analytic field
    sampled at the quadrature points.
    """
    fam, q = space.family, space.degree
    if fam not in ("N", "RT"):
        raise ValueError("interpolation implemented for vector families")
    mesh = space.topo.mesh
    coeffs = np.zeros(space.ndof, dtype=complex)

    nedge = edge_moment_count(fam, q)
    if nedge and space.edge_ids.size:
        rule = segment_rule(q + fdeg)
        legv = poly.eval_legendre01(nedge, rule.points[:, 0])
        ev = space.topo.edges[space.edge_ids]
        lo, hi = mesh.vertices[ev[:, 0]], mesh.vertices[ev[:, 1]]
        pts = lo[:, None, :] + rule.points[None, :, :1] * (hi - lo)[:, None, :]
        vals = fn(pts.reshape(-1, 3)).reshape(pts.shape[0], -1, 3)
        tang = hi - lo
        mom = np.einsum("epc,ec,pk,p->ek", vals, tang, legv, rule.weights)
        idx = space.offsets["edge"] + (
            np.arange(space.edge_ids.size)[:, None] * nedge + np.arange(nedge)
        )
        coeffs[idx.ravel()] = mom.ravel()

    nface = face_moment_count(fam, q)
    if nface and space.face_ids.size:
        rule = triangle_rule(q + fdeg)
        fv = space.topo.faces[space.face_ids]
        p0 = mesh.vertices[fv[:, 0]]
        t1 = mesh.vertices[fv[:, 1]] - p0
        t2 = mesh.vertices[fv[:, 2]] - p0
        pts = (
            p0[:, None, :]
            + rule.points[None, :, :1] * t1[:, None, :]
            + rule.points[None, :, 1:2] * t2[:, None, :]
        )
        vals = fn(pts.reshape(-1, 3)).reshape(pts.shape[0], -1, 3)
        if fam == "N":
            mdeg = q - 1
            mu = poly.tri_orthonormal_basis(mdeg)
            muv = poly.eval_tri_monomials(mdeg, rule.points) @ mu.T
            nm = muv.shape[1]
            mom = np.empty((fv.shape[0], nface), dtype=complex)
            for i, tau in enumerate((t1, t2)):
                mom[:, i * nm : (i + 1) * nm] = np.einsum(
                    "epc,ec,pm,p->em", vals, tau, muv, rule.weights
                )
        else:
            mu = poly.tri_orthonormal_basis(q)
            muv = poly.eval_tri_monomials(q, rule.points) @ mu.T
            nvec = np.cross(t1, t2)
            mom = np.einsum("epc,ec,pm,p->em", vals, nvec, muv, rule.weights)
        idx = space.offsets["face"] + (
            np.arange(space.face_ids.size)[:, None] * nface + np.arange(nface)
        )
        coeffs[idx.ravel()] = mom.ravel()

    ncell = cell_moment_count(fam, q)
    if ncell:
        rule = tet_rule(q + fdeg)
        geo = space.geometry()
        pts = np.einsum("edc,pc->epd", geo["B"], rule.points) + geo["origin"][:, None, :]
        vals = fn(pts.reshape(-1, 3)).reshape(space.tets.size, -1, 3)
        if fam == "N":
            vhat = np.einsum("ecd,epc->epd", geo["B"], vals)
        else:
            vhat = np.einsum(
                "edc,epc->epd", np.linalg.inv(geo["B"]), vals
            ) * geo["det"][:, None, None]
        mdeg = {"N": q - 2, "RT": q - 1}[fam]
        from .fembasis.reference import tet_orthonormal_scalar

        mu = tet_orthonormal_scalar(mdeg)
        muv = poly.eval_monomials(mdeg, rule.points) @ mu.T
        nm = muv.shape[1]
        mom = np.einsum("epa,pm,p->eam", vhat, muv, rule.weights).reshape(
            space.tets.size, -1
        )
        idx = space.offsets["cell"] + (
            np.arange(space.tets.size)[:, None] * ncell + np.arange(ncell)
        )
        coeffs[idx.ravel()] = mom.ravel()

    coeffs[space.constrained] = 0.0
    if np.max(np.abs(coeffs.imag)) == 0.0:
        coeffs = coeffs.real.astype(complex)
    return DiscreteField(space, coeffs)


# -- assembly -----------------------------------------------------------------


def _scatter(space, elem_mats, eids, rows_free_only=True):
    """Scatter per-element dense matrices into a COO over all dofs."""
    dofs = space.elem_dofs[eids]
    n = dofs.shape[1]
    rows = np.repeat(dofs, n, axis=1).ravel()
    cols = np.tile(dofs, (1, n)).ravel()
    return rows, cols, elem_mats.reshape(-1)


def assemble_weighted_mass(space, weight_of_elem, chunk=4096):
    """Sparse matrix of (W phi_j, phi_i) over ALL dofs of a vector space.

    ``weight_of_elem`` is an (nel, 3, 3) stack of symmetric tensors.
    """
    fam, q = space.family, space.degree
    blocks = tensors.vv_blocks(fam, q, fam, q)
    geo = space.geometry()
    data, rows, cols = [], [], []
    nel = space.tets.size
    for start in range(0, nel, chunk):
        eids = np.arange(start, min(start + chunk, nel))
        B, Binv, det = geo["B"][eids], geo["Binv"][eids], geo["det"][eids]
        W = weight_of_elem[eids]
        if fam == "N":
            gm = np.einsum("eac,ecd,ebd->eab", Binv, W, Binv) * np.abs(det)[:, None, None]
        else:
            gm = np.einsum("eca,ecd,edb->eab", B, W, B) / np.abs(det)[:, None, None]
        amat = np.einsum("eab,abij->eij", gm, blocks)
        amat = _orient_elem_mats(space, amat, eids)
        r, c, d = _scatter(space, amat, eids)
        rows.append(r)
        cols.append(c)
        data.append(d)
    return sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(space.ndof, space.ndof),
    ).tocsr()


def _orient_elem_mats(space, amat, eids):
    out = np.empty_like(amat)
    pat = space.pattern_of[eids]
    for p in np.unique(pat):
        ix = np.nonzero(pat == p)[0]
        c = space.orientation(int(p))
        out[ix] = c.T @ amat[ix] @ c
    return out


def assemble_curlcurl(space, weight_of_elem, chunk=4096):
    """Sparse matrix of (W curl phi_j, curl phi_i) for an N space."""
    q = space.degree
    blocks = tensors.curlcurl_blocks(q, q)
    geo = space.geometry()
    data, rows, cols = [], [], []
    nel = space.tets.size
    for start in range(0, nel, chunk):
        eids = np.arange(start, min(start + chunk, nel))
        B, det = geo["B"][eids], geo["det"][eids]
        W = weight_of_elem[eids]
        gm = np.einsum("eac,ecd,edb->eab", np.swapaxes(B, 1, 2), W, B) / np.abs(det)[
            :, None, None
        ]
        amat = np.einsum("eab,abij->eij", gm, blocks)
        amat = _orient_elem_mats(space, amat, eids)
        r, c, d = _scatter(space, amat, eids)
        rows.append(r)
        cols.append(c)
        data.append(d)
    return sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(space.ndof, space.ndof),
    ).tocsr()


def assemble_maxwell(space, omega, coeffs):
    """Free-dof matrix of b(u, v) = -w^2 (eps u, v) + (chi curl u, curl v).

    All reference integrals are exact for degree 2q+2, so the returned
    matrix is the sesquilinear form to rounding; it is real symmetric for
    real material tensors (complex symmetric in general).
    """
    if omega <= 0:
        raise ValueError("frequency must be positive")
    regions = space.topo.mesh.region_of_tet[space.tets]
    eps = coeffs.eps_of(regions)
    chi = coeffs.chi_of(regions)
    a = assemble_curlcurl(space, chi) - omega**2 * assemble_weighted_mass(space, eps)
    free = space.free_index
    return SystemMatrix(matrix=a[free][:, free].tocsr(), space=space)


def assemble_load(space, j_field, omega):
    """Free-dof vector of i w (J_h, phi_i) for J_h in an RT space."""
    rt = j_field.space
    if rt.topo is not space.topo or not np.array_equal(rt.tets, space.tets):
        raise ValueError("load assembly requires matching meshes")
    cross = tensors.vv_blocks(space.family, space.degree, "RT", rt.degree)
    lref = np.einsum("aaij->ij", cross)  # covariant x contravariant: no geometry
    jloc = rt.gather(j_field.coeffs)
    out = np.zeros(space.ndof, dtype=complex)
    pats_w = space.pattern_of
    for p in np.unique(pats_w):
        ix = np.nonzero(pats_w == p)[0]
        cw = space.orientation(int(p))
        crt = rt.orientation(int(p))
        jhat = jloc[ix] @ crt.T
        lelem = np.einsum("ki,ij,ej->ek", cw, lref, jhat)
        np.add.at(out, space.elem_dofs[ix].ravel(), lelem.ravel())
    return 1j * omega * out[space.free_index]


def solve_sparse(a, rhs, tol=1e-10):
    """Direct sparse solve honoring a relative-residual contract.

    Real matrices are factored in real arithmetic and solved for the real
    and imaginary parts of the right-hand side separately; one pass of
    iterative refinement keeps residuals near rounding even for the highly
    indefinite near-resonance systems.
    """
    from .linalg import factorize

    mat = a.matrix if isinstance(a, SystemMatrix) else a
    rhs = np.asarray(rhs)
    if mat.shape[0] != mat.shape[1] or mat.shape[0] != rhs.shape[0]:
        raise ValueError("matrix/rhs size mismatch")
    if rhs.size == 0:
        return np.zeros(0, dtype=complex)
    rnorm = np.linalg.norm(rhs)
    if rnorm == 0.0:
        return np.zeros_like(rhs, dtype=complex)
    factor = factorize(mat)
    x = factor.solve(rhs)
    res = np.linalg.norm(mat @ x - rhs) / rnorm
    if res > tol:
        x = x + factor.solve(rhs - mat @ x)
        res = np.linalg.norm(mat @ x - rhs) / rnorm
    if not np.isfinite(res) or res > tol:
        raise SolverFailure("sparse solve missed residual tolerance", residual=res)
    return np.asarray(x, dtype=complex)


def galerkin_residual(system, x_free, load_free):
    """Row residuals b(E_h, phi_i) - i w (J_h, phi_i) over free dofs."""
    return system.matrix @ x_free - load_free
