"""Patch-by-patch reconstruction of the equilibrated displacement and
magnetic fields, with global accumulation.

The pipeline runs in three stages with a barrier after the first two:

1. per vertex a: solve the displacement problem (RT_{p+2}, divergence
   constrained) and the intermediate problem (RT_{p+1}, divergence plus
   elementwise mean-value constraints); accumulate the intermediate field
   globally;
2. per (element, vertex): lift the hat-weighted accumulated intermediate
   field into divergence-free RT_{p+2} pieces with matching normal traces
   (feasible because the mean-value constraints force elementwise zero
   mean of the accumulated field);
3. per vertex a: assemble the divergence-free total current variation and
   solve the curl-constrained magnetic problem; accumulate displacement
   and magnetic contributions globally.

All feasibility preconditions (compatibility integrals, flux integrals,
divergence-freeness of the current variation) are checked against
tolerances before each solve; violations raise EquilibrationError since
they indicate broken Galerkin orthogonality upstream.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..errors import EquilibrationError
from ..fembasis import tensors as T
from ..fembasis.reference import get_reference
from ..mesh import build_vertex_patch
from ..spaces import DiscreteField, build_space, dof_injection, mesh_geometry
from .patchops import PatchLocal, PatchOps, patch_digest
from .verify import verify_equilibration

_OPS_CACHE = OrderedDict()
OPS_CACHE_MAX = 512
OPS_CACHE_MAX_BYTES = 1_200_000_000
_ops_cache_bytes = 0


def _cached_ops(topo, local, p, eps, chi, keep_dense=False):
    global _ops_cache_bytes
    key = patch_digest(topo, local, p, eps, chi)
    ops = _OPS_CACHE.get(key)
    if ops is None or (keep_dense and not ops.keep_dense):
        ops = PatchOps(topo, local, p, eps, chi, keep_dense=keep_dense)
        old = _OPS_CACHE.pop(key, None)
        if old is not None:
            _ops_cache_bytes -= old.nbytes
        _OPS_CACHE[key] = ops
        _ops_cache_bytes += ops.nbytes
        while _OPS_CACHE and (
            len(_OPS_CACHE) > OPS_CACHE_MAX
            or _ops_cache_bytes > OPS_CACHE_MAX_BYTES
        ):
            _, evicted = _OPS_CACHE.popitem(last=False)
            _ops_cache_bytes -= evicted.nbytes
    else:
        _OPS_CACHE.move_to_end(key)
    return ops


def clear_ops_cache():
    global _ops_cache_bytes
    _OPS_CACHE.clear()
    _ops_cache_bytes = 0


@dataclass
class HatFunction:
    """Piecewise-linear hat of one vertex restricted to its patch."""

    vertex: int
    tets: np.ndarray
    local_index: np.ndarray
    gradients: np.ndarray  # (nel, 3) constant per element

    def values(self, eids, ref_pts):
        """psi at reference points of the given patch elements."""
        lam = np.column_stack(
            [1.0 - ref_pts.sum(axis=1), ref_pts[:, 0], ref_pts[:, 1], ref_pts[:, 2]]
        )
        return lam[:, self.local_index[eids]].T


def hat_function(topo, patch):
    mesh = topo.mesh
    la = np.argmax(mesh.tets[patch.tets] == patch.center, axis=1)
    geo = mesh_geometry(topo)
    grads = np.empty((patch.tets.size, 4, 3))
    grads[:, 1:, :] = geo["Binv"][patch.tets]
    grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
    return HatFunction(
        vertex=int(patch.center),
        tets=patch.tets,
        local_index=la,
        gradients=grads[np.arange(patch.tets.size), la],
    )


@dataclass
class PatchField:
    """Local coefficient vector over a constrained patch space."""

    patch: object
    space: object
    coeffs: np.ndarray


class PatchContext:
    """Shared state for patch solves on one primal solution."""

    def __init__(self, primal, feas_tol=1e-9, res_tol=1e-10, keep_dense=False):
        self.primal = primal
        self.topo = primal.topo
        self.p = primal.p
        self.omega = primal.omega
        self.coeffs = primal.coeffs
        self.feas_tol = feas_tol
        self.res_tol = res_tol
        self.keep_dense = keep_dense
        regions = self.topo.mesh.region_of_tet
        self.eps_all = primal.coeffs.eps_of(regions)
        self.chi_all = primal.coeffs.chi_of(regions)
        self.w_space = primal.E.space
        self.j_space = primal.J.space

    def local_ops(self, a):
        patch = build_vertex_patch(self.topo, a)
        local = PatchLocal(self.topo, patch, self.p, self.w_space, self.j_space)
        eps = self.eps_all[patch.tets]
        chi = self.chi_all[patch.tets]
        ops = _cached_ops(self.topo, local, self.p, eps, chi,
                          keep_dense=self.keep_dense)
        return local, ops

    def gather(self, local):
        return (
            self.primal.E.coeffs[local.w_dofs],
            self.primal.J.coeffs[local.j_dofs],
        )


def _displacement_rhs(ctx, ops, e_loc, j_loc):
    omega = ctx.omega
    nel = ops.nel
    f = np.stack([ops.d_f[e] @ e_loc[e] for e in range(nel)])
    c_onb = np.stack(
        [
            (-1j / omega) * (ops.d_cj[e] @ j_loc[e]) + ops.d_ce[e] @ e_loc[e]
            for e in range(nel)
        ]
    )
    return f, c_onb


def _theta_rhs(ctx, ops, e_loc, j_loc):
    omega = ctx.omega
    nel = ops.nel
    f = np.stack([ops.t_f[e] @ e_loc[e] for e in range(nel)])
    c_onb = np.stack(
        [
            -1j * omega * (ops.t_cj[e] @ j_loc[e])
            - omega**2 * (ops.t_ce[e] @ e_loc[e])
            for e in range(nel)
        ]
    )
    cmv = np.stack([ops.t_mv[e] @ e_loc[e] for e in range(nel)])
    return f, c_onb, cmv


def _check_compat(c_onb, gam, interior, feas_tol, what):
    cmean = c_onb @ gam
    if interior:
        scale = max(np.abs(c_onb).max(), 1e-300)
        if abs(cmean.sum()) > feas_tol * scale:
            raise EquilibrationError(
                f"{what}: compatibility integral {abs(cmean.sum()):.3e} exceeds "
                f"{feas_tol:.1e} x {scale:.3e}; Galerkin orthogonality broken?"
            )
    return cmean


def solve_displacement(ctx, local, ops, e_loc, j_loc):
    f, c_onb = _displacement_rhs(ctx, ops, e_loc, j_loc)
    cmean = _check_compat(c_onb, ops.gam2, ops.interior, ctx.feas_tol,
                          "displacement")
    czm = c_onb @ ops.z2.T
    coeffs = ops.dps.solve(local.v_rt2, f, czm, cmean)
    num, den = ops.dps.constraint_residual(local.v_rt2, coeffs, czm, cmean)
    if num > ctx.res_tol * (1.0 + den):
        raise EquilibrationError(
            f"displacement divergence residual {num:.3e} exceeds tolerance"
        )
    return coeffs


def solve_theta_tilde(ctx, local, ops, e_loc, j_loc):
    f, c_onb, cmv = _theta_rhs(ctx, ops, e_loc, j_loc)
    cmean = _check_compat(c_onb, ops.gam1, ops.interior, ctx.feas_tol,
                          "intermediate field")
    czm = c_onb @ ops.z1.T
    coeffs = ops.tts.solve(local.v_rt1, f, czm, cmean, cmv)
    num, den = ops.tts.constraint_residual(local.v_rt1, coeffs, czm, cmean, cmv)
    if num > ctx.res_tol * (1.0 + den):
        raise EquilibrationError(
            f"intermediate-field constraint residual {num:.3e} exceeds tolerance"
        )
    return coeffs


def assemble_current_variation(ctx, local, ops, j_loc, d_coeffs, t_coeffs,
                               hat_store):
    """G^a = i w psi J_h + w^2 D^a + (theta-tilde^a - theta-hat^a) in RT_{p+2}.

    Verifies the divergence-free property and the vanishing constrained
    traces before returning the patch coefficient vector.
    """
    omega = ctx.omega
    v2 = local.v_rt2
    tets = local.patch.tets
    g = np.zeros(v2.ndof, dtype=complex)
    divnum = 0.0
    scale = 0.0
    for e in range(ops.nel):
        dofs = v2.elem_dofs[e]
        g_loc = (
            1j * omega * (ops.g_embj[e] @ j_loc[e])
            + omega**2 * d_coeffs[dofs]
            + ops.g_emb1[e] @ t_coeffs[local.v_rt1.elem_dofs[e]]
            - hat_store[tets[e], local.la[e]]
        )
        g[dofs] = g_loc
    bad = np.abs(g[v2.constrained]).max(initial=0.0)
    gnorm = 0.0
    for e in range(ops.nel):
        g_loc = g[v2.elem_dofs[e]]
        gnorm += float(np.real(g_loc.conj() @ (ops.mag.m2[e] @ g_loc)))
        dv = ops.div2_rows[e] @ g_loc
        divnum += float(np.real(dv.conj() @ dv)) / ops.adet[e]
    gnorm = np.sqrt(max(gnorm, 1e-300))
    divnum = np.sqrt(divnum)
    if bad > ctx.feas_tol * gnorm:
        raise EquilibrationError(
            f"current variation has nonzero constrained trace {bad:.3e}"
        )
    g[v2.constrained] = 0.0
    if divnum > ctx.feas_tol * max(gnorm, 1.0):
        raise EquilibrationError(
            f"current variation divergence {divnum:.3e} exceeds "
            f"{ctx.feas_tol:.1e} x {gnorm:.3e}"
        )
    return g, divnum / max(gnorm, 1e-300)


def solve_magnetic(ctx, local, ops, e_loc, g_coeffs):
    """Curl-constrained magnetic minimizer via particular field + gradient."""
    omega = ctx.omega
    vn, vs = local.v_n2, local.v_s
    mag = ops.mag
    nel = ops.nel
    rhs_n = np.zeros(vn.ndof, dtype=complex)
    for e in range(nel):
        g_loc = g_coeffs[local.v_rt2.elem_dofs[e]]
        np.add.at(rhs_n, vn.elem_dofs[e], mag.rc[e] @ (g_loc / (1j * omega)))
    rhs = np.concatenate([rhs_n[mag.fn], np.zeros(mag.fs.size, dtype=complex)])
    sol = mag.saddle.solve(rhs)
    hp = np.zeros(vn.ndof, dtype=complex)
    hp[mag.fn] = sol[: mag.fn.size]

    rhs_s = np.zeros(vs.ndof, dtype=complex)
    for e in range(nel):
        hp_loc = hp[vn.elem_dofs[e]]
        np.add.at(
            rhs_s,
            vs.elem_dofs[e],
            ops.h_q1[e] @ e_loc[e] - 1j * omega * (mag.q2[e] @ hp_loc),
        )
    u = np.zeros(vs.ndof, dtype=complex)
    u[mag.fs] = mag.lap_factor.solve(rhs_s[mag.fs])

    h = np.zeros(vn.ndof, dtype=complex)
    for e in range(nel):
        h[vn.elem_dofs[e]] = hp[vn.elem_dofs[e]] + (
            mag.ge[e] @ u[vs.elem_dofs[e]]
        ) / (1j * omega)
    h[vn.constrained] = 0.0

    num = 0.0
    den = 0.0
    for e in range(nel):
        g_loc = g_coeffs[local.v_rt2.elem_dofs[e]]
        r = 1j * omega * (mag.ce[e] @ h[vn.elem_dofs[e]]) - g_loc
        num += float(np.real(r.conj() @ (mag.m2[e] @ r)))
        den += float(np.real(g_loc.conj() @ (mag.m2[e] @ g_loc)))
    res = np.sqrt(num) / max(np.sqrt(den), 1e-300)
    if res > 1e-9 * max(1.0, 1.0):
        raise EquilibrationError(
            f"magnetic curl-constraint residual {res:.3e} exceeds 1e-9"
        )
    return h, res


def lift_theta_hat(ctx, theta_tilde, rt1_global, chunk=2048):
    """Stage 2: elementwise div-free liftings of psi^a (theta-tilde).

    Returns (store, max_flux, max_reassembly) where store[K, v] holds the
    canonical RT_{p+2}(K) coefficients of the lifting for local vertex v.
    """
    topo = ctx.topo
    p = ctx.p
    mesh = topo.mesh
    ntet = mesh.ntets
    q2 = p + 2
    ref2 = get_reference("RT", q2)
    nloc2 = ref2.dim
    nf = ref2.slots("face", 0).size * 4
    cell = np.arange(nf, nloc2)
    face = np.arange(nf)
    gam2, z2 = T.zero_mean_split(q2)
    d2onb = T.div_p_moments(q2, q2).T
    emb1h = [T.dof_embedding("RT", q2, "RT", p + 1, hat_vertex=v) for v in range(4)]
    emb10 = T.dof_embedding("RT", q2, "RT", p + 1)
    vvb2 = T.vv_blocks("RT", q2, "RT", q2)
    geo = mesh_geometry(topo)
    from ..fembasis.reference import orientation_matrix
    from ..spaces import orientation_patterns

    patterns, pat_inv = orientation_patterns(topo)
    pmats = {}
    for pid, (flips, perms) in enumerate(patterns):
        c2 = orientation_matrix("RT", q2, flips, perms)
        c1 = orientation_matrix("RT", p + 1, flips, perms)
        zm = z2 @ d2onb @ c2
        mean = gam2 @ d2onb @ c2
        mean[cell] = 0.0
        pmats[pid] = {
            "emb": [np.linalg.solve(c2, emb1h[v] @ c1) for v in range(4)],
            "emb0": np.linalg.solve(c2, emb10 @ c1),
            "zm": zm,
            "mean": mean,
        }

    regions = mesh.region_of_tet
    mu_all = np.linalg.inv(ctx.coeffs.chi_of(regions))
    store = np.zeros((ntet, 4, nloc2), dtype=complex)
    max_flux = 0.0
    max_reasm = 0.0
    nzm = z2.shape[0]
    nc = cell.size
    for start in range(0, ntet, chunk):
        eids = np.arange(start, min(start + chunk, ntet))
        tloc = theta_tilde[rt1_global.elem_dofs[eids]]
        B = geo["B"][eids]
        det = np.abs(geo["det"][eids])
        gm = np.einsum("eca,ecd,edb->eab", B, mu_all[eids], B) / det[:, None, None]
        gblocks = np.einsum("eab,abij->eij", gm, vvb2)
        pats = pat_inv[eids]
        dmat = np.empty((eids.size, 4, nloc2), dtype=complex)
        reasm = np.zeros((eids.size, nloc2), dtype=complex)
        zmf = np.empty((eids.size, nzm, nf))
        scale = np.abs(tloc).max(initial=0.0) + 1e-300
        for pid in np.unique(pats):
            sel = np.nonzero(pats == pid)[0]
            pm = pmats[int(pid)]
            c2 = orientation_matrix("RT", q2, *patterns[int(pid)])
            gblocks[sel] = c2.T @ gblocks[sel] @ c2
            for v in range(4):
                dmat[sel, v] = tloc[sel] @ pm["emb"][v].T
            reasm[sel] = tloc[sel] @ pm["emb0"].T
            zmf[sel] = pm["zm"][:, face][None]
            flux = float(np.abs(dmat[sel] @ pm["mean"]).max(initial=0.0))
            max_flux = max(max_flux, flux / scale)
        if max_flux > ctx.feas_tol:
            raise EquilibrationError(
                f"lifting flux integral (relative) {max_flux:.3e} exceeds "
                f"{ctx.feas_tol:.1e}"
            )
        zmi = pmats[int(pats[0])]["zm"][:, cell]  # cell block is pattern-free
        kkt = np.zeros((eids.size, nc + nzm, nc + nzm))
        kkt[:, :nc, :nc] = gblocks[:, nf:, nf:]
        kkt[:, :nc, nc:] = np.broadcast_to(zmi.T, (eids.size, nc, nzm))
        kkt[:, nc:, :nc] = np.broadcast_to(zmi, (eids.size, nzm, nc))
        rhs = np.empty((eids.size, 4, nc + nzm), dtype=complex)
        rhs[:, :, :nc] = np.einsum(
            "eij,evj->evi", gblocks[:, nf:, nf:], dmat[:, :, nf:]
        )
        rhs[:, :, nc:] = -np.einsum("erf,evf->evr", zmf, dmat[:, :, :nf])
        sol = np.linalg.solve(kkt[:, None], rhs[..., None])[..., 0]
        out = dmat.copy()
        out[:, :, nf:] = sol[:, :, :nc]
        store[eids] = out
        diff = np.abs(out.sum(axis=1) - reasm).max(initial=0.0)
        max_reasm = max(max_reasm, float(diff / scale))
    return store, max_flux, max_reasm


def accumulate_global(patch_fields, glob_space):
    """Sum zero-extended patch fields into a global conforming field."""
    out = np.zeros(glob_space.ndof, dtype=complex)
    for pf in patch_fields:
        inj = dof_injection(pf.space, glob_space)
        np.add.at(out, inj, pf.coeffs)
    return DiscreteField(glob_space, out)


@dataclass
class EquilibratedFields:
    """Reconstructed fields plus verification data."""

    D: DiscreteField
    H: DiscreteField
    theta_tilde: DiscreteField
    residuals: dict
    stats: dict


def equilibrate_fields(primal, feas_tol=1e-9, res_tol=1e-10, with_jumps=False,
                       progress=None):
    """Run the full three-stage reconstruction for a primal solution."""
    ctx = PatchContext(primal, feas_tol=feas_tol, res_tol=res_tol)
    topo = ctx.topo
    p = ctx.p
    nv = topo.mesh.nvertices
    rt2g = build_space(topo, "RT", p + 2)
    rt1g = build_space(topo, "RT", p + 1)
    n2g = build_space(topo, "N", p + 2)

    theta_tilde = np.zeros(rt1g.ndof, dtype=complex)
    d_store = [None] * nv
    t_store = [None] * nv
    for a in range(nv):
        local, ops = ctx.local_ops(a)
        e_loc, j_loc = ctx.gather(local)
        d_coeffs = solve_displacement(ctx, local, ops, e_loc, j_loc)
        t_coeffs = solve_theta_tilde(ctx, local, ops, e_loc, j_loc)
        d_store[a] = d_coeffs
        t_store[a] = t_coeffs
        np.add.at(theta_tilde, dof_injection(local.v_rt1, rt1g), t_coeffs)
        if progress and a % 512 == 0:
            progress(f"patch stage 1: {a + 1}/{nv}")

    hat_store, max_flux, max_reasm = lift_theta_hat(ctx, theta_tilde, rt1g)

    d_glob = np.zeros(rt2g.ndof, dtype=complex)
    h_glob = np.zeros(n2g.ndof, dtype=complex)
    theta_sum = np.zeros(rt2g.ndof, dtype=complex)
    max_curl_res = 0.0
    max_div_res = 0.0
    for a in range(nv):
        local, ops = ctx.local_ops(a)
        e_loc, j_loc = ctx.gather(local)
        g_coeffs, div_res = assemble_current_variation(
            ctx, local, ops, j_loc, d_store[a], t_store[a], hat_store
        )
        max_div_res = max(max_div_res, div_res)
        h_coeffs, curl_res = solve_magnetic(ctx, local, ops, e_loc, g_coeffs)
        max_curl_res = max(max_curl_res, curl_res)
        inj2 = dof_injection(local.v_rt2, rt2g)
        np.add.at(d_glob, inj2, d_store[a])
        np.add.at(h_glob, dof_injection(local.v_n2, n2g), h_coeffs)
        # theta^a = embedded theta-tilde^a minus the lifting, summed for the
        # global cancellation check
        th = np.zeros(local.v_rt2.ndof, dtype=complex)
        for e in range(ops.nel):
            th[local.v_rt2.elem_dofs[e]] = (
                ops.g_emb1[e] @ t_store[a][local.v_rt1.elem_dofs[e]]
                - hat_store[local.patch.tets[e], local.la[e]]
            )
        np.add.at(theta_sum, inj2, th)
        if progress and a % 512 == 0:
            progress(f"patch stage 3: {a + 1}/{nv}")

    d_field = DiscreteField(rt2g, d_glob)
    h_field = DiscreteField(n2g, h_glob)
    tt_field = DiscreteField(rt1g, theta_tilde)
    residuals = verify_equilibration(
        d_field, h_field, primal.J, ctx.omega, ctx.coeffs, with_jumps=with_jumps
    )
    stats = {
        "max_theta_hat_flux": max_flux,
        "theta_reassembly": max_reasm,
        "max_curl_constraint_residual": max_curl_res,
        "max_div_constraint_residual": max_div_res,
        "theta_cancellation": float(
            np.abs(theta_sum).max()
            / max(np.abs(theta_tilde).max(), 1e-300)
        ),
    }
    return EquilibratedFields(
        D=d_field, H=h_field, theta_tilde=tt_field, residuals=residuals,
        stats=stats
    )


# -- single-patch convenience wrappers -----------------------------------------


def displacement_patch(primal, a, feas_tol=1e-9, res_tol=1e-10):
    """Displacement reconstruction on the patch of vertex a."""
    ctx = PatchContext(primal, feas_tol, res_tol)
    local, ops = ctx.local_ops(a)
    e_loc, j_loc = ctx.gather(local)
    coeffs = solve_displacement(ctx, local, ops, e_loc, j_loc)
    return PatchField(patch=local.patch, space=local.v_rt2, coeffs=coeffs)


def theta_tilde_patch(primal, a, feas_tol=1e-9, res_tol=1e-10):
    """Intermediate divergence-corrected field on the patch of vertex a."""
    ctx = PatchContext(primal, feas_tol, res_tol)
    local, ops = ctx.local_ops(a)
    e_loc, j_loc = ctx.gather(local)
    coeffs = solve_theta_tilde(ctx, local, ops, e_loc, j_loc)
    return PatchField(patch=local.patch, space=local.v_rt1, coeffs=coeffs)


def theta_hat_element(primal, theta_tilde_field, k, a, feas_tol=1e-9):
    """Divergence-free lifting of psi^a theta-tilde on one element."""
    ctx = PatchContext(primal, feas_tol)
    store, _, _ = lift_theta_hat(ctx, theta_tilde_field.coeffs,
                                 theta_tilde_field.space)
    la = int(np.argmax(ctx.topo.mesh.tets[k] == a))
    if ctx.topo.mesh.tets[k, la] != a:
        raise ValueError(f"vertex {a} is not a vertex of element {k}")
    return store[k, la]


def current_variation_patch(primal, a, d_patch, t_patch, hat_store,
                            feas_tol=1e-9):
    """Patchwise divergence-free total current variation G^a."""
    ctx = PatchContext(primal, feas_tol)
    local, ops = ctx.local_ops(a)
    _, j_loc = ctx.gather(local)
    g, _ = assemble_current_variation(
        ctx, local, ops, j_loc, d_patch.coeffs, t_patch.coeffs, hat_store
    )
    return PatchField(patch=local.patch, space=local.v_rt2, coeffs=g)


def magnetic_patch(primal, a, g_patch, feas_tol=1e-9):
    """Curl-constrained magnetic reconstruction on the patch of vertex a."""
    ctx = PatchContext(primal, feas_tol)
    local, ops = ctx.local_ops(a)
    e_loc, _ = ctx.gather(local)
    h, _ = solve_magnetic(ctx, local, ops, e_loc, g_patch.coeffs)
    return PatchField(patch=local.patch, space=local.v_n2, coeffs=h)
