"""Tetrahedral meshes: structured generation, Gmsh import, connectivity.

Orientation convention: edges are directed from the lower to the higher
global vertex index, faces are keyed (and parametrized) by their sorted
global vertex triple.  All derived orientation data is therefore a pure
function of global vertex indices and survives any reordering of the tet
list, which is what makes the conforming DOF numbering mesh-order
independent.
"""

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .errors import InvalidMeshError, MeshFormatError, NonconformingMeshError
from .fembasis.reference import EDGE_VERTS, FACE_VERTS, PERMS3

_PERM_CODE = {p: i for i, p in enumerate(PERMS3)}


def canonical_tet_order(vertices, tets):
    """Sort vertex ids ascending, then swap the last two if volume < 0."""
    tets = np.sort(np.asarray(tets, dtype=np.int64), axis=1)
    v = vertices[tets]
    det = np.linalg.det(np.swapaxes(v[:, 1:] - v[:, :1], 1, 2))
    flip = det < 0
    tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
    return tets


@dataclass
class Mesh:
    """Conforming tetrahedral mesh of a polyhedral domain.

    ``boundary_faces`` holds sorted vertex triples with an integer tag per
    face; ``region_of_tet`` carries the physical-partition label used to
    look up piecewise-constant material tensors.
    """

    vertices: np.ndarray
    tets: np.ndarray
    boundary_faces: np.ndarray
    boundary_tags: np.ndarray
    region_of_tet: np.ndarray
    ignored_elements: int = 0

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.tets = canonical_tet_order(self.vertices, self.tets)
        self.boundary_faces = np.sort(
            np.asarray(self.boundary_faces, dtype=np.int64).reshape(-1, 3), axis=1
        )
        self.boundary_tags = np.asarray(self.boundary_tags, dtype=np.int64)
        self.region_of_tet = np.asarray(self.region_of_tet, dtype=np.int64)
        if np.any(
            (self.tets[:, :, None] == self.tets[:, None, :]).sum(axis=(1, 2)) > 4
        ):
            raise InvalidMeshError("tet with repeated vertex")
        vols = self.volumes()
        hk = _tet_diameters(self.vertices, self.tets)
        bad = vols <= 1e-12 * hk**3
        if np.any(bad):
            raise InvalidMeshError(
                f"{int(bad.sum())} degenerate tets (volume below 1e-12 h^3)"
            )

    @property
    def nvertices(self):
        return self.vertices.shape[0]

    @property
    def ntets(self):
        return self.tets.shape[0]

    def volumes(self):
        v = self.vertices[self.tets]
        det = np.linalg.det(np.swapaxes(v[:, 1:] - v[:, :1], 1, 2))
        return det / 6.0


def _tet_diameters(vertices, tets):
    v = vertices[tets]
    d = np.linalg.norm(v[:, :, None, :] - v[:, None, :, :], axis=3)
    return d.max(axis=(1, 2))


def _unique_faces(tets):
    faces = np.sort(tets[:, FACE_VERTS], axis=2).reshape(-1, 3)
    uniq, inverse, counts = np.unique(
        faces, axis=0, return_inverse=True, return_counts=True
    )
    return uniq, inverse.reshape(-1, 4), counts


def generate_structured_cube(n):
    """Kuhn (6-tet) split of the unit cube on an n x n x n grid.

    Every subcube is split the same way (all 6 tets share the main diagonal
    of the cube), so the mesh is conforming and deterministic; h = sqrt(3)/n.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"subdivision count must be an integer >= 1, got {n}")
    n = int(n)
    axis = np.arange(n + 1) / n
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    vertices = np.column_stack([x.ravel(), y.ravel(), z.ravel()])

    def vid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    ii, jj, kk = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    ii, jj, kk = ii.ravel(), jj.ravel(), kk.ravel()
    tets = []
    for perm in permutations(range(3)):
        steps = np.zeros((4, 3), dtype=np.int64)
        for s, ax in enumerate(perm):
            steps[s + 1] = steps[s]
            steps[s + 1, ax] += 1
        corners = [
            vid(ii + s[0], jj + s[1], kk + s[2]) for s in steps
        ]
        tets.append(np.column_stack(corners))
    tets = np.vstack(tets)

    uniq, _, counts = _unique_faces(canonical_tet_order(vertices, tets))
    bfaces = uniq[counts == 1]
    tags = np.zeros(bfaces.shape[0], dtype=np.int64)
    coords = vertices[bfaces]
    for ax in range(3):
        tags[np.all(coords[:, :, ax] < 1e-14, axis=1)] = 2 * ax + 1
        tags[np.all(coords[:, :, ax] > 1 - 1e-14, axis=1)] = 2 * ax + 2
    return Mesh(
        vertices=vertices,
        tets=tets,
        boundary_faces=bfaces,
        boundary_tags=tags,
        region_of_tet=np.zeros(tets.shape[0], dtype=np.int64),
    )


def load_gmsh(path):
    """Read a Gmsh MSH 2.2 ASCII file (nodes, tets, boundary triangles).

    Element types other than 2 (triangle) and 4 (tetrahedron) are skipped;
    their count is reported on the returned mesh as ``ignored_elements``.
    """
    with open(path) as f:
        lines = f.read().splitlines()

    pos = 0

    def next_line(expect=None):
        nonlocal pos
        if pos >= len(lines):
            raise MeshFormatError(
                f"unexpected end of file{' in section ' + expect if expect else ''}",
                line=len(lines),
            )
        ln = lines[pos].strip()
        pos += 1
        return ln

    node_ids, node_xyz = [], []
    tets, regions, tris, tri_tags = [], [], [], []
    ignored = 0
    seen_nodes = seen_elements = False

    while pos < len(lines):
        header = next_line()
        if not header:
            continue
        if header == "$MeshFormat":
            fmt = next_line("$MeshFormat")
            parts = fmt.split()
            if not parts or not parts[0].startswith("2."):
                raise MeshFormatError(
                    f"unsupported MSH version {fmt!r}, need 2.x ASCII", line=pos
                )
            if next_line("$MeshFormat") != "$EndMeshFormat":
                raise MeshFormatError("missing $EndMeshFormat", line=pos)
        elif header == "$Nodes":
            seen_nodes = True
            try:
                count = int(next_line("$Nodes"))
            except ValueError:
                raise MeshFormatError("bad node count in $Nodes", line=pos)
            for _ in range(count):
                parts = next_line("$Nodes").split()
                if len(parts) < 4:
                    raise MeshFormatError("malformed node record in $Nodes", line=pos)
                node_ids.append(int(parts[0]))
                node_xyz.append([float(parts[1]), float(parts[2]), float(parts[3])])
            if next_line("$Nodes") != "$EndNodes":
                raise MeshFormatError("missing $EndNodes", line=pos)
        elif header == "$Elements":
            seen_elements = True
            try:
                count = int(next_line("$Elements"))
            except ValueError:
                raise MeshFormatError("bad element count in $Elements", line=pos)
            for _ in range(count):
                parts = next_line("$Elements").split()
                if len(parts) < 3:
                    raise MeshFormatError(
                        "malformed element record in $Elements", line=pos
                    )
                etype, ntags = int(parts[1]), int(parts[2])
                tags = [int(t) for t in parts[3 : 3 + ntags]]
                nodes = [int(v) for v in parts[3 + ntags :]]
                if etype == 4:
                    if len(nodes) != 4:
                        raise MeshFormatError("tet needs 4 nodes", line=pos)
                    tets.append(nodes)
                    regions.append(tags[0] if tags else 0)
                elif etype == 2:
                    if len(nodes) != 3:
                        raise MeshFormatError("triangle needs 3 nodes", line=pos)
                    tris.append(nodes)
                    tri_tags.append(tags[0] if tags else 0)
                else:
                    ignored += 1
            if next_line("$Elements") != "$EndElements":
                raise MeshFormatError("missing $EndElements", line=pos)
        elif header.startswith("$"):
            # skip unknown sections up to their matching end marker
            endmark = "$End" + header[1:]
            while next_line(header) != endmark:
                pass
        else:
            raise MeshFormatError(f"unexpected content {header!r}", line=pos)

    if not seen_nodes or not node_ids:
        raise MeshFormatError("no $Nodes section found", line=len(lines))
    if not seen_elements or not tets:
        raise MeshFormatError("no tetrahedra found in $Elements", line=len(lines))

    remap = {nid: i for i, nid in enumerate(node_ids)}
    try:
        tets = np.array([[remap[v] for v in t] for t in tets], dtype=np.int64)
        tris = np.array(
            [[remap[v] for v in t] for t in tris], dtype=np.int64
        ).reshape(-1, 3)
    except KeyError as exc:
        raise MeshFormatError(f"element references unknown node {exc}") from exc

    vertices = np.array(node_xyz)
    if tris.shape[0] == 0:
        uniq, _, counts = _unique_faces(canonical_tet_order(vertices, tets))
        tris = uniq[counts == 1]
        tri_tags = [0] * tris.shape[0]
    return Mesh(
        vertices=vertices,
        tets=tets,
        boundary_faces=tris,
        boundary_tags=np.array(tri_tags, dtype=np.int64).reshape(-1),
        region_of_tet=np.array(regions, dtype=np.int64),
        ignored_elements=ignored,
    )


@dataclass
class Topology:
    """Global connectivity with deterministic orientation keys."""

    mesh: Mesh
    edges: np.ndarray        # (E, 2) ascending pairs, lexicographically sorted
    faces: np.ndarray        # (F, 3) ascending triples
    tet2edge: np.ndarray     # (T, 6)
    tet2face: np.ndarray     # (T, 4)
    face_tets: np.ndarray    # (F, 2), -1 when absent
    edge_boundary: np.ndarray
    face_boundary: np.ndarray
    edge_flips: np.ndarray   # (T, 6) bool
    face_perms: np.ndarray   # (T, 4) PERMS3 index
    _vert2tet_ptr: np.ndarray = field(repr=False, default=None)
    _vert2tet_idx: np.ndarray = field(repr=False, default=None)

    @property
    def nedges(self):
        return self.edges.shape[0]

    @property
    def nfaces(self):
        return self.faces.shape[0]

    def vertex_tets(self, a):
        return self._vert2tet_idx[self._vert2tet_ptr[a] : self._vert2tet_ptr[a + 1]]


def build_topology(mesh):
    """Unique edge/face numbering, incidence, boundary flags, orientations."""
    tets = mesh.tets
    ntet = tets.shape[0]

    epairs = np.sort(tets[:, EDGE_VERTS], axis=2).reshape(-1, 2)
    edges, einv = np.unique(epairs, axis=0, return_inverse=True)
    tet2edge = einv.reshape(ntet, 6)

    faces, tet2face, fcounts = _unique_faces(tets)
    if np.any(fcounts > 2):
        raise NonconformingMeshError(
            f"{int((fcounts > 2).sum())} faces shared by more than two tets"
        )
    face_boundary = fcounts == 1

    bset = np.unique(mesh.boundary_faces, axis=0)
    tset = faces[face_boundary]
    if bset.shape != tset.shape or not np.array_equal(bset, tset):
        raise InvalidMeshError(
            "declared boundary faces do not match the topological boundary"
        )

    order = np.argsort(tet2face.ravel(), kind="stable")
    face_tets = np.full((faces.shape[0], 2), -1, dtype=np.int64)
    forder = tet2face.ravel()[order]
    towner = order // 4
    first = np.searchsorted(forder, np.arange(faces.shape[0]), side="left")
    last = np.searchsorted(forder, np.arange(faces.shape[0]), side="right")
    face_tets[:, 0] = towner[first]
    two = last - first == 2
    face_tets[two, 1] = towner[np.minimum(first[two] + 1, order.size - 1)]

    edge_boundary = np.zeros(edges.shape[0], dtype=bool)
    bfaces = faces[face_boundary]
    bedges = np.sort(
        bfaces[:, [[0, 1], [0, 2], [1, 2]]].reshape(-1, 2), axis=1
    )
    eidx = np.searchsorted(
        edges[:, 0] * (mesh.nvertices + 1) + edges[:, 1],
        bedges[:, 0] * (mesh.nvertices + 1) + bedges[:, 1],
    )
    edge_boundary[eidx] = True

    ev = np.array(EDGE_VERTS)
    edge_flips = tets[:, ev[:, 0]] > tets[:, ev[:, 1]]

    trio = tets[:, FACE_VERTS]  # (T, 4, 3) global ids per local face
    ranks = np.argsort(trio, axis=2)
    code = ranks[..., 0] * 9 + ranks[..., 1] * 3 + ranks[..., 2]
    lut = np.full(27, -1, dtype=np.int8)
    for p, i in _PERM_CODE.items():
        lut[p[0] * 9 + p[1] * 3 + p[2]] = i
    face_perms = lut[code]

    vorder = np.argsort(tets.ravel(), kind="stable")
    vptr = np.searchsorted(tets.ravel()[vorder], np.arange(mesh.nvertices + 1))
    vidx = vorder // 4

    return Topology(
        mesh=mesh,
        edges=edges,
        faces=faces,
        tet2edge=tet2edge,
        tet2face=tet2face,
        face_tets=face_tets,
        edge_boundary=edge_boundary,
        face_boundary=face_boundary,
        edge_flips=edge_flips,
        face_perms=face_perms,
        _vert2tet_ptr=vptr,
        _vert2tet_idx=vidx,
    )


@dataclass
class Patch:
    """Vertex patch: all tets containing the center vertex.

    ``gamma_a`` are the domain-boundary faces containing the center vertex
    (empty for interior vertices); ``gamma_a_c`` the remaining patch-boundary
    faces, where the local H0(div)/H0(curl) trace constraints live.
    """

    center: int
    tets: np.ndarray
    interior: bool
    gamma_a: np.ndarray
    gamma_a_c: np.ndarray
    h_patch: float


def build_vertex_patch(topo, a):
    """Patch of vertex a with its boundary split into Gamma_a and Gamma_a^c."""
    tets = np.sort(topo.vertex_tets(a))
    if tets.size == 0:
        raise InvalidMeshError(f"vertex {a} belongs to no tetrahedron")
    pf = topo.tet2face[tets].ravel()
    uniq, counts = np.unique(pf, return_counts=True)
    pbound = uniq[counts == 1]
    has_a = np.any(topo.faces[pbound] == a, axis=1)
    on_domain_boundary = topo.face_boundary[pbound]
    gamma_a = pbound[has_a & on_domain_boundary]
    gamma_a_c = pbound[~(has_a & on_domain_boundary)]
    pv = np.unique(topo.mesh.tets[tets])
    coords = topo.mesh.vertices[pv]
    h = np.max(
        np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=2)
    )
    return Patch(
        center=int(a),
        tets=tets,
        interior=gamma_a.size == 0,
        gamma_a=gamma_a,
        gamma_a_c=gamma_a_c,
        h_patch=float(h),
    )


@dataclass
class CoefficientField:
    """Piecewise-constant material tensors keyed by region label.

    eps is the electric permittivity, chi the inverse permeability; both
    must be symmetric positive definite in every region.
    """

    eps: dict
    chi: dict

    def __post_init__(self):
        for name, table in (("eps", self.eps), ("chi", self.chi)):
            for region, t in table.items():
                t = np.asarray(t, dtype=float)
                if t.shape == (3,):
                    t = np.diag(t)
                if t.shape != (3, 3):
                    raise ValueError(f"{name}[{region}] must be 3x3 or diagonal-3")
                if np.max(np.abs(t - t.T)) > 1e-14 * max(1.0, np.abs(t).max()):
                    raise ValueError(f"{name}[{region}] is not symmetric")
                if np.linalg.eigvalsh(t).min() <= 0:
                    raise ValueError(f"{name}[{region}] is not positive definite")
                table[region] = t

    @classmethod
    def identity(cls, regions=(0,)):
        eye = np.eye(3)
        return cls(
            eps={int(r): eye.copy() for r in regions},
            chi={int(r): eye.copy() for r in regions},
        )

    def _gather(self, table, regions):
        out = np.empty((len(regions), 3, 3))
        for i, r in enumerate(np.asarray(regions).ravel()):
            try:
                out[i] = table[int(r)]
            except KeyError:
                raise KeyError(f"no material tensor for region {int(r)}")
        return out

    def eps_of(self, regions):
        return self._gather(self.eps, regions)

    def chi_of(self, regions):
        return self._gather(self.chi, regions)

    def mu_of(self, regions):
        return np.linalg.inv(self.chi_of(regions))

    def diagnostics(self):
        """Eigenvalue bounds, contrasts and minimal wavespeed per material."""
        ev_eps = {r: np.linalg.eigvalsh(t) for r, t in self.eps.items()}
        ev_mu = {r: np.linalg.eigvalsh(np.linalg.inv(t)) for r, t in self.chi.items()}
        eps_min = min(v[0] for v in ev_eps.values())
        eps_max = max(v[-1] for v in ev_eps.values())
        mu_min = min(v[0] for v in ev_mu.values())
        mu_max = max(v[-1] for v in ev_mu.values())
        return {
            "eps_min": eps_min,
            "eps_max": eps_max,
            "mu_min": mu_min,
            "mu_max": mu_max,
            "contrast_eps": eps_max / eps_min,
            "contrast_mu": mu_max / mu_min,
            "c_min": 1.0 / np.sqrt(eps_max * mu_max),
        }


def mesh_stats(mesh):
    """Per-tet and global size/shape measures.

    h_K is the largest vertex distance, rho_K the inscribed-ball diameter
    6 V / A, kappa_K their ratio.
    """
    v = mesh.vertices[mesh.tets]
    hk = _tet_diameters(mesh.vertices, mesh.tets)
    vols = mesh.volumes()
    if np.any(vols <= 0):
        raise InvalidMeshError("nonpositive tet volume")
    areas = np.zeros(mesh.ntets)
    for fv in FACE_VERTS:
        p0, p1, p2 = v[:, fv[0]], v[:, fv[1]], v[:, fv[2]]
        areas += 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)
    rho = 6.0 * vols / areas
    kappa = hk / rho
    return {
        "h": float(hk.max()),
        "h_K": hk,
        "kappa_K": kappa,
        "kappa": float(kappa.max()),
    }


def boundary_volume(mesh):
    """Volume from the divergence theorem: sum over boundary of x.n/3.

    Independent of tet volumes; used to cross-check that the boundary faces
    enclose the meshed region.
    """
    topo_faces = mesh.boundary_faces
    total = 0.0
    v = mesh.vertices
    tri = v[topo_faces]
    centroid_all = v[mesh.tets].mean(axis=1)
    # orient each boundary face outward using its incident tet
    faces_sorted = np.sort(mesh.tets[:, FACE_VERTS], axis=2)
    key = lambda f: f[:, 0] * (mesh.nvertices + 1) ** 2 + f[:, 1] * (
        mesh.nvertices + 1
    ) + f[:, 2]
    fkeys = key(faces_sorted.reshape(-1, 3))
    bkeys = key(topo_faces)
    order = np.argsort(fkeys, kind="stable")
    locs = np.searchsorted(fkeys[order], bkeys)
    owners = order[locs] // 4
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    outward = np.einsum(
        "fc,fc->f", tri.mean(axis=1) - centroid_all[owners], n
    )
    n = n * np.sign(outward)[:, None]
    total = np.einsum("fc,fc->", tri.mean(axis=1), n) / 6.0
    return float(total)
