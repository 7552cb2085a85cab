import numpy as np
import pytest

from maxwellest import fembasis as fb
from maxwellest.errors import DegenerateElementError, UnsupportedDegreeError
from maxwellest.fembasis import polynomials as poly
from maxwellest.fembasis.reference import (
    EDGE_VERTS,
    FACE_VERTS,
    REF_VERTS,
    _DofTable,
    get_reference,
)

RNG = np.random.default_rng(42)


def random_interior_points(n):
    b = RNG.dirichlet(np.ones(4), size=n)
    return b[:, 1:]  # barycentric -> reference coordinates


# -- quadrature ---------------------------------------------------------------


def test_quadrature_basic_monomials():
    r = fb.tet_quadrature(4)
    assert abs(r.weights.sum() - 1.0 / 6.0) < 1e-14
    assert abs(np.sum(r.weights * r.points[:, 0]) - 1.0 / 24.0) < 1e-15
    val = np.sum(r.weights * r.points[:, 0] ** 2 * r.points[:, 1])
    assert abs(val - 1.0 / 360.0) < 1e-16


@pytest.mark.parametrize("degree", [0, 1, 2, 5, 8, 11, 14])
def test_quadrature_exactness(degree):
    r = fb.tet_quadrature(degree)
    exps = poly.monomial_exponents(degree)
    for e in exps[RNG.choice(len(exps), size=min(len(exps), 12), replace=False)]:
        got = np.sum(
            r.weights
            * r.points[:, 0] ** e[0]
            * r.points[:, 1] ** e[1]
            * r.points[:, 2] ** e[2]
        )
        exact = fb.simplex_monomial_integral(*e)
        assert abs(got - exact) <= 1e-14 * max(1.0, abs(exact))


def test_quadrature_degree_cap():
    with pytest.raises(UnsupportedDegreeError):
        fb.tet_quadrature(15)
    with pytest.raises(UnsupportedDegreeError):
        fb.tet_quadrature(-1)


# -- scalar bases -------------------------------------------------------------


def test_scalar_basis_q0():
    vals, grads = fb.eval_scalar_basis(0, random_interior_points(5))
    assert vals.shape == (1, 5)
    assert np.allclose(vals, 1.0)
    assert np.abs(grads).max() < 1e-14


def test_scalar_basis_q1_partition_of_unity():
    pts = random_interior_points(8)
    vals, _ = fb.eval_scalar_basis(1, pts)
    assert vals.shape[0] == 4
    assert np.abs(vals.sum(axis=0) - 1.0).max() < 1e-12
    # barycentric: vertex values are a permutation of the identity
    vvals, _ = fb.eval_scalar_basis(1, REF_VERTS)
    assert np.allclose(np.sort(vvals, axis=0)[-1], 1.0)


def test_scalar_basis_q2_gram_nonsingular():
    rule = fb.tet_quadrature(4)
    vals, _ = fb.eval_scalar_basis(2, rule.points)
    gram = (vals * rule.weights) @ vals.T
    assert vals.shape[0] == 10
    assert np.linalg.cond(gram) < 1e5


# -- vector bases -------------------------------------------------------------


def bary_gradients():
    g = np.zeros((4, 3))
    g[0] = -1.0
    g[1:] = np.eye(3)
    return g


def test_whitney_basis_q0():
    ref = get_reference("N", 0)
    assert ref.dim == 6
    pts = random_interior_points(6)
    vals = ref.values(pts)
    curls = ref.curls(pts)
    lam = np.column_stack([1 - pts.sum(axis=1), pts])
    g = bary_gradients()
    for e, (a, b) in enumerate(EDGE_VERTS):
        whitney = lam[:, a, None] * g[b] - lam[:, b, None] * g[a]
        assert np.abs(vals[e] - whitney).max() < 1e-12
        # curl is the constant 2 grad(la) x grad(lb)
        expected = 2 * np.cross(g[a], g[b])
        assert np.abs(curls[e] - expected).max() < 1e-12


def test_nedelec_dims():
    assert get_reference("N", 1).dim == 20
    assert get_reference("N", 2).dim == 45
    with pytest.raises(UnsupportedDegreeError):
        get_reference("N", 6)


def test_whitney_edge_moments():
    # unit tangential moment on own edge, zero on the other five
    ref = get_reference("N", 0)
    gl, gw = np.polynomial.legendre.leggauss(4)
    t = 0.5 * (gl + 1)
    w = 0.5 * gw
    moments = np.zeros((6, 6))
    for e, (a, b) in enumerate(EDGE_VERTS):
        pts = REF_VERTS[a] + np.outer(t, REF_VERTS[b] - REF_VERTS[a])
        vals = ref.values(pts)
        tang = REF_VERTS[b] - REF_VERTS[a]
        moments[:, e] = np.einsum("npc,c,p->n", vals, tang, w)
    assert np.abs(moments - np.eye(6)).max() < 1e-12


def test_rt_dims_and_divergence():
    ref = get_reference("RT", 0)
    assert ref.dim == 4
    pts = random_interior_points(4)
    divs = ref.divs(pts)
    assert np.abs(divs - divs[:, :1]).max() < 1e-12  # constant divergence
    assert get_reference("RT", 1).dim == 15


def test_rt0_divergence_theorem():
    # flux sum over faces equals the divergence integral
    ref = get_reference("RT", 0)
    rule2 = fb.triangle_rule(4)
    total_flux = np.zeros(4)
    for fv in FACE_VERTS:
        w0, w1, w2 = (REF_VERTS[v] for v in fv)
        x = w0 + np.outer(rule2.points[:, 0], w1 - w0) + np.outer(
            rule2.points[:, 1], w2 - w0
        )
        nvec = np.cross(w1 - w0, w2 - w0)
        vals = ref.values(x)
        # orient outward: check sign against centroid
        out = np.sign((x.mean(axis=0) - np.full(3, 0.25)) @ nvec)
        total_flux += out * np.einsum("npc,c,p->n", vals, nvec, rule2.weights)
    rule3 = fb.tet_quadrature(2)
    div_int = np.einsum("np,p->n", ref.divs(rule3.points), rule3.weights)
    assert np.abs(total_flux - div_int).max() < 1e-12


def test_div_maps_rt_onto_p():
    for q in (0, 1, 2):
        ref = get_reference("RT", q)
        rule = fb.tet_quadrature(2 * q + 2)
        divs = ref.divs(rule.points)
        pref = get_reference("P", q)
        pv = pref.values(rule.points)
        proj = np.einsum("np,mp,p->nm", divs, pv, rule.weights)
        assert np.linalg.matrix_rank(proj, tol=1e-10) == pref.dim


@pytest.mark.parametrize("family,q", [("N", 0), ("N", 2), ("RT", 1), ("RT", 3), ("S", 3)])
def test_unisolvence(family, q):
    ref = get_reference(family, q)
    dt = _DofTable(family, q)
    if ref.is_scalar:
        mat = dt.apply(lambda pts: ref.values(pts))
    else:
        mat = dt.apply(lambda pts: ref.values(pts))
    assert np.abs(mat - np.eye(ref.dim)).max() < 1e-10


@pytest.mark.parametrize("family", ["N", "RT"])
@pytest.mark.parametrize("q", [1, 2])
def test_p_inclusion(family, q):
    # every [P_q]^3 field is reproduced inside N_q and RT_q
    ref = get_reference(family, q)
    dt = _DofTable(family, q)
    rng = np.random.default_rng(3)
    coeff = rng.standard_normal((3, poly.scalar_dim(q)))

    def f(pts):
        mono = poly.eval_monomials(q, pts)
        return (coeff @ mono.T).T[None, :, :]

    dofs = dt.apply(f)[:, 0]
    pts = random_interior_points(9)
    approx = np.einsum("n,npc->pc", dofs, ref.values(pts))
    exact = f(pts)[0]
    assert np.abs(approx - exact).max() < 1e-10


@pytest.mark.parametrize("family,q", [("N", 1), ("N", 3), ("RT", 2), ("S", 4), ("P", 2)])
def test_derivative_consistency(family, q):
    ref = get_reference(family, q)
    pts = random_interior_points(5) * 0.8 + 0.05
    h = 1e-5
    rng = np.random.default_rng(1)
    c = rng.standard_normal(ref.dim)
    if family in ("P", "S"):
        grad = np.einsum("n,npc->pc", c, ref.gradients(pts))
        for ax in range(3):
            dp = pts.copy(); dp[:, ax] += h
            dm = pts.copy(); dm[:, ax] -= h
            fd = (c @ ref.values(dp) - c @ ref.values(dm)) / (2 * h)
            assert np.abs(grad[:, ax] - fd).max() < 1e-6 * max(1, np.abs(grad).max())
    elif family == "N":
        curl = np.einsum("n,npc->pc", c, ref.curls(pts))
        fd = np.zeros_like(curl)
        for ax in range(3):
            dp = pts.copy(); dp[:, ax] += h
            dm = pts.copy(); dm[:, ax] -= h
            dv = (np.einsum("n,npc->pc", c, ref.values(dp))
                  - np.einsum("n,npc->pc", c, ref.values(dm))) / (2 * h)
            if ax == 0:
                fd[:, 1] -= dv[:, 2]; fd[:, 2] += dv[:, 1]
            elif ax == 1:
                fd[:, 0] += dv[:, 2]; fd[:, 2] -= dv[:, 0]
            else:
                fd[:, 0] -= dv[:, 1]; fd[:, 1] += dv[:, 0]
        assert np.abs(curl - fd).max() < 1e-6 * max(1, np.abs(curl).max())
    else:
        div = c @ ref.divs(pts)
        fd = np.zeros_like(div)
        for ax in range(3):
            dp = pts.copy(); dp[:, ax] += h
            dm = pts.copy(); dm[:, ax] -= h
            dv = (np.einsum("n,npc->pc", c, ref.values(dp))
                  - np.einsum("n,npc->pc", c, ref.values(dm))) / (2 * h)
            fd += dv[:, ax]
        assert np.abs(div - fd).max() < 1e-6 * max(1, np.abs(div).max())


@pytest.mark.parametrize("q", [0, 1, 2])
def test_tangential_trace_degree(q):
    # tangential trace of N_q on a face lies in the face's trace space
    ref = get_reference("N", q)
    rule = fb.triangle_rule(2 * q + 2)
    fv = FACE_VERTS[2]
    w0, w1, w2 = (REF_VERTS[v] for v in fv)
    x = w0 + np.outer(rule.points[:, 0], w1 - w0) + np.outer(
        rule.points[:, 1], w2 - w0
    )
    vals = ref.values(x)
    tang = np.stack([vals @ (w1 - w0), vals @ (w2 - w0)], axis=2)
    flat = tang.reshape(ref.dim, -1)
    # the 2D Nedelec trace space has dimension (q+1)(q+3)
    assert np.linalg.matrix_rank(flat, tol=1e-9) == (q + 1) * (q + 3)


@pytest.mark.parametrize("q", [0, 1, 2])
def test_normal_trace_degree(q):
    ref = get_reference("RT", q)
    rule = fb.triangle_rule(2 * q + 2)
    fv = FACE_VERTS[0]
    w0, w1, w2 = (REF_VERTS[v] for v in fv)
    x = w0 + np.outer(rule.points[:, 0], w1 - w0) + np.outer(
        rule.points[:, 1], w2 - w0
    )
    normal = np.cross(w1 - w0, w2 - w0)
    vn = ref.values(x) @ normal
    mono = poly.eval_tri_monomials(q, rule.points)
    joint = np.vstack([vn, mono.T])
    assert np.linalg.matrix_rank(joint, tol=1e-9) == poly.tri_dim(q)


# -- Piola --------------------------------------------------------------------


def test_push_forward_identity():
    ref = get_reference("N", 1)
    pts = random_interior_points(4)
    gm = fb.GeomMap.from_vertices(REF_VERTS)
    tabs = {"values": ref.values(pts), "curls": ref.curls(pts)}
    phys = fb.push_forward(gm, "N", tabs)
    assert np.abs(phys["values"] - tabs["values"]).max() < 1e-14
    assert np.abs(phys["curls"] - tabs["curls"]).max() < 1e-14


def test_push_forward_scaling():
    s = 2.5
    ref = get_reference("N", 1)
    pts = random_interior_points(4)
    gm = fb.GeomMap.from_vertices(REF_VERTS * s)
    tabs = {"values": ref.values(pts), "curls": ref.curls(pts)}
    phys = fb.push_forward(gm, "N", tabs)
    assert np.abs(phys["values"] - tabs["values"] / s).max() < 1e-13
    assert np.abs(phys["curls"] - tabs["curls"] / s**2).max() < 1e-13


def test_push_forward_flux_preservation():
    # contravariant transform preserves face normal moments
    rng = np.random.default_rng(5)
    verts = REF_VERTS + 0.3 * rng.standard_normal((4, 3))
    gm = fb.GeomMap.from_vertices(verts)
    ref = get_reference("RT", 1)
    rule = fb.triangle_rule(6)
    fv = FACE_VERTS[1]
    w0, w1, w2 = (REF_VERTS[v] for v in fv)
    xhat = w0 + np.outer(rule.points[:, 0], w1 - w0) + np.outer(
        rule.points[:, 1], w2 - w0
    )
    nref = np.cross(w1 - w0, w2 - w0)
    ref_flux = np.einsum("npc,c,p->n", ref.values(xhat), nref, rule.weights)
    # mapped face: same parametric points, mapped tangents
    y0, y1, y2 = (gm.to_physical(v[None, :])[0] for v in (w0, w1, w2))
    nphys = np.cross(y1 - y0, y2 - y0)
    phys_vals = fb.push_forward(gm, "RT", {"values": ref.values(xhat)})["values"]
    phys_flux = np.einsum("npc,c,p->n", phys_vals, nphys, rule.weights)
    assert np.abs(phys_flux - ref_flux).max() < 1e-12


def test_degenerate_map_rejected():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0.5, 0.5, 1e-16]])
    with pytest.raises(DegenerateElementError):
        fb.GeomMap.from_vertices(verts)


def test_geommap_det_is_six_volumes():
    rng = np.random.default_rng(11)
    verts = REF_VERTS + 0.2 * rng.standard_normal((4, 3))
    gm = fb.GeomMap.from_vertices(verts)
    vol = abs(np.linalg.det((verts[1:] - verts[0]).T)) / 6
    assert abs(abs(gm.det) - 6 * vol) < 1e-12
