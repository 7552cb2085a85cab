"""Machine-precision verification of the equilibration identities.

Reports the relative L2 residuals of

    i w curl(H_h) = i w J_h + w^2 D_h        (curl identity)
    -w^2 div(D_h) = i w div(J_h)             (divergence identity)

together with the largest normal jump of D_h and tangential jump of H_h
across interior faces.  For a correctly reconstructed pair all numbers sit
at solver precision; the acceptance suite gates on 1e-8.
"""

import numpy as np

from ..fembasis.quadrature import tet_rule
from ..spaces import element_values, eval_at_points, mesh_geometry

_FACE_SAMPLES = np.array(
    [
        [0.55, 0.25],
        [0.25, 0.55],
        [0.2, 0.2],
        [0.6, 0.15],
        [0.15, 0.6],
        [1.0 / 3.0, 1.0 / 3.0],
    ]
)


def _field_l2(vals, qwts, dets):
    return float(
        np.sqrt(
            np.einsum("epc,epc,p,e->", vals, vals.conj(), qwts, np.abs(dets)).real
        )
    )


def verify_equilibration(d_field, h_field, j_field, omega, coeffs,
                         with_jumps=True, jump_faces=None):
    """Residual report for the accumulated equilibrated fields."""
    topo = d_field.space.topo
    mesh = topo.mesh
    p2 = d_field.space.degree
    rule = tet_rule(2 * p2 + 2)
    geo = mesh_geometry(topo)
    dets = geo["det"]
    ntet = mesh.ntets

    num_curl = den_curl = 0.0
    num_div = den_divj = 0.0
    chunk = max(1, 1_500_000 // (rule.npoints * 3))
    for start in range(0, ntet, chunk):
        eids = np.arange(start, min(start + chunk, ntet))
        hv = element_values(h_field.space, h_field.coeffs, rule.points, eids,
                            ("curls",))
        dv = element_values(d_field.space, d_field.coeffs, rule.points, eids,
                            ("values", "divs"))
        jv = element_values(j_field.space, j_field.coeffs, rule.points, eids,
                            ("values", "divs"))
        adet = np.abs(dets[eids])
        target = 1j * omega * jv["values"] + omega**2 * dv["values"]
        resid = 1j * omega * hv["curls"] - target
        num_curl += np.einsum(
            "epc,epc,p,e->", resid, resid.conj(), rule.weights, adet
        ).real
        den_curl += np.einsum(
            "epc,epc,p,e->", target, target.conj(), rule.weights, adet
        ).real
        dres = -(omega**2) * dv["divs"] - 1j * omega * jv["divs"]
        num_div += np.einsum(
            "ep,ep,p,e->", dres, dres.conj(), rule.weights, adet
        ).real
        den_divj += np.einsum(
            "ep,ep,p,e->",
            1j * omega * jv["divs"],
            (1j * omega * jv["divs"]).conj(),
            rule.weights,
            adet,
        ).real
    den_curl = max(np.sqrt(den_curl), 1e-300)
    curl_res = float(np.sqrt(num_curl) / den_curl)
    div_den = max(np.sqrt(den_divj), den_curl)
    div_res = float(np.sqrt(num_div) / div_den)

    out = {"curl_residual": curl_res, "div_residual": div_res}
    if with_jumps:
        jd, jh = field_jumps(d_field, h_field, faces=jump_faces)
        out["max_jump_div"] = jd
        out["max_jump_curl"] = jh
    return out


def field_jumps(d_field, h_field, faces=None, chunk=512):
    """Max relative two-sided trace jumps: normal for D, tangential for H."""
    topo = d_field.space.topo
    mesh = topo.mesh
    interior = np.nonzero(~topo.face_boundary)[0]
    if faces is not None:
        interior = np.asarray(faces)
        interior = interior[~topo.face_boundary[interior]]
    geo = mesh_geometry(topo)
    jd_max = jh_max = 0.0
    scale_d = scale_h = 1e-300
    for start in range(0, interior.size, chunk):
        fids = interior[start : start + chunk]
        tri = mesh.vertices[topo.faces[fids]]
        pts = np.einsum("sk,fkc->fsc",
                        np.column_stack([1 - _FACE_SAMPLES.sum(axis=1),
                                         _FACE_SAMPLES]), tri)
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n /= np.linalg.norm(n, axis=1)[:, None]
        vals = []
        for side in (0, 1):
            owners = topo.face_tets[fids, side]
            ref = np.einsum(
                "edc,esc->esd", geo["Binv"][owners],
                pts - geo["origin"][owners][:, None, :]
            )
            dv = eval_at_points(d_field.space, d_field.coeffs,
                                np.searchsorted(d_field.space.tets, owners),
                                ref)["values"]
            hv = eval_at_points(h_field.space, h_field.coeffs,
                                np.searchsorted(h_field.space.tets, owners),
                                ref)["values"]
            vals.append((dv, hv))
        d_jump = vals[0][0] - vals[1][0]
        h_jump = vals[0][1] - vals[1][1]
        jn = np.abs(np.einsum("fsc,fc->fs", d_jump, n))
        ht = h_jump - np.einsum("fsc,fc->fs", h_jump, n)[:, :, None] * n[:, None, :]
        jd_max = max(jd_max, float(jn.max(initial=0.0)))
        jh_max = max(jh_max, float(np.abs(ht).max(initial=0.0)))
        scale_d = max(scale_d, float(np.abs(vals[0][0]).max(initial=0.0)))
        scale_h = max(scale_h, float(np.abs(vals[0][1]).max(initial=0.0)))
    return jd_max / scale_d, jh_max / scale_h
