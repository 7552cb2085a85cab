"""End-to-end primal solve of the time-harmonic Maxwell cavity problem.

Given a mesh, degree p, frequency and piecewise-constant materials, the
driver interpolates the current density into RT_p, assembles the
sesquilinear form -w^2 (eps E, v) + (chi curl E, curl v) over the
tangential-trace-free Nedelec space N_p, and solves the resulting sparse
system with a direct factorization.
"""

from dataclasses import dataclass

import numpy as np

from .fembasis.quadrature import tet_rule
from .mesh import build_topology
from .spaces import (
    DiscreteField,
    assemble_load,
    assemble_maxwell,
    build_space,
    element_values,
    interpolate,
    mesh_geometry,
    solve_sparse,
)


@dataclass
class PrimalSolution:
    """Discrete electric field with the data needed downstream."""

    E: DiscreteField
    J: DiscreteField
    omega: float
    coeffs: object
    residual: float
    topo: object

    @property
    def p(self):
        return self.E.space.degree

    @property
    def ndof(self):
        return self.E.space.nfree


def solve_maxwell(mesh_or_topo, p, omega, coeffs, j_analytic, tol=1e-10,
                  j_quad_extra=10):
    """Solve for E_h in N_p intersect H0(curl) with J_h the RT_p interpolant.

    Raises SolverFailure when the factorization cannot meet the residual
    tolerance, which is the expected signal at a discrete resonance.
    """
    if p < 1:
        raise ValueError("primal solves need p >= 1 (N_p must contain P_1^3)")
    if omega <= 0:
        raise ValueError("frequency must be positive")
    topo = mesh_or_topo if hasattr(mesh_or_topo, "tet2face") else build_topology(
        mesh_or_topo
    )
    w_space = build_space(topo, "N", p, constraint="tangential")
    rt_space = build_space(topo, "RT", p)
    j_h = interpolate(rt_space, j_analytic, fdeg=j_quad_extra)
    system = assemble_maxwell(w_space, omega, coeffs)
    load = assemble_load(w_space, j_h, omega)
    x = solve_sparse(system, load, tol=tol)
    res = float(np.linalg.norm(system.matrix @ x - load) /
                max(np.linalg.norm(load), 1e-300))
    e_coeffs = np.zeros(w_space.ndof, dtype=complex)
    e_coeffs[w_space.free_index] = x
    return PrimalSolution(
        E=DiscreteField(w_space, e_coeffs),
        J=j_h,
        omega=omega,
        coeffs=coeffs,
        residual=res,
        topo=topo,
    )


def _weighted_sq(vals, w_tensors, qwts, dets):
    """Per-element integral of (W v).conj(v) given values at quad points."""
    wv = np.einsum("edc,epc->epd", w_tensors, vals)
    return np.einsum("epd,epd,p->e", wv, vals.conj(), qwts).real * np.abs(dets)


def energy_norm(u, omega, coeffs, per_element=False, quad_degree=None):
    """Energy norm sqrt(w^2 |u|_eps^2 + |curl u|_chi^2) of a discrete field.

    Analytic fields go through :func:`energy_norm_analytic` instead.  The
    global norm is the root of the elementwise sum of squares.
    """
    space = u.space
    p = space.degree
    deg = quad_degree if quad_degree is not None else max(2 * p + 4, 10)
    rule = tet_rule(deg)
    geo = mesh_geometry(space.topo)
    regions = space.topo.mesh.region_of_tet[space.tets]
    eps = coeffs.eps_of(regions)
    chi = coeffs.chi_of(regions)
    dets = geo["det"][space.tets]
    out = np.zeros(space.tets.size)
    chunk = max(1, 2_000_000 // (rule.npoints * 3))
    for start in range(0, space.tets.size, chunk):
        eids = np.arange(start, min(start + chunk, space.tets.size))
        res = element_values(space, u.coeffs, rule.points, eids,
                             what=("values", "curls"))
        out[eids] = omega**2 * _weighted_sq(
            res["values"], eps[eids], rule.weights, dets[eids]
        )
        out[eids] += _weighted_sq(res["curls"], chi[eids], rule.weights, dets[eids])
    per = np.sqrt(out)
    if per_element:
        return per
    return float(np.sqrt(out.sum()))


def energy_norm_analytic(topo, value_fn, curl_fn, omega, coeffs, quad_degree,
                         per_element=False):
    """Energy norm of an analytic field by elementwise quadrature."""
    rule = tet_rule(quad_degree)
    geo = mesh_geometry(topo)
    regions = topo.mesh.region_of_tet
    eps = coeffs.eps_of(regions)
    chi = coeffs.chi_of(regions)
    out = np.zeros(topo.mesh.ntets)
    chunk = max(1, 2_000_000 // (rule.npoints * 3))
    for start in range(0, topo.mesh.ntets, chunk):
        eids = np.arange(start, min(start + chunk, topo.mesh.ntets))
        pts = (
            np.einsum("edc,pc->epd", geo["B"][eids], rule.points)
            + geo["origin"][eids][:, None, :]
        )
        flat = pts.reshape(-1, 3)
        vals = np.asarray(value_fn(flat)).reshape(eids.size, -1, 3)
        curls = np.asarray(curl_fn(flat)).reshape(eids.size, -1, 3)
        out[eids] = omega**2 * _weighted_sq(
            vals, eps[eids], rule.weights, geo["det"][eids]
        )
        out[eids] += _weighted_sq(curls, chi[eids], rule.weights, geo["det"][eids])
    per = np.sqrt(out)
    if per_element:
        return per
    return float(np.sqrt(out.sum()))
