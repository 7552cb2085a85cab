import numpy as np
import pytest

from maxwellest import spaces as sps
from maxwellest.estimate import (
    effectivity_report,
    energy_error,
    local_estimators,
    manufactured_solution,
)

RNG = np.random.default_rng(8)


def curl_curl_fd(exact, pts, h=1e-5):
    """Finite differences of the analytic curl: independent of closed forms."""
    cc = np.zeros((pts.shape[0], 3), dtype=complex)
    for ax in range(3):
        for sgn in (1, -1):
            q = pts.copy()
            q[:, ax] += sgn * h
            c = exact.curl_E(q)
            f = sgn / (2 * h)
            if ax == 0:
                cc[:, 1] += -f * c[:, 2]
                cc[:, 2] += f * c[:, 1]
            elif ax == 1:
                cc[:, 0] += f * c[:, 2]
                cc[:, 2] += -f * c[:, 0]
            else:
                cc[:, 0] += -f * c[:, 1]
                cc[:, 1] += f * c[:, 0]
    return cc


def test_boundary_values_vanish():
    exact = manufactured_solution(2, 0.25)
    y = RNG.random((5, 1))
    z = RNG.random((5, 1))
    for x1 in (0.0, 1.0):
        pts = np.hstack([np.full((5, 1), x1), y, z])
        assert np.abs(exact.E(pts)).max() < 1e-12
    for x3 in (0.0, 1.0):
        pts = np.hstack([y, z, np.full((5, 1), x3)])
        assert np.abs(exact.E(pts)).max() < 1e-12


def test_frequency_values_m3():
    exact = manufactured_solution(3, 0.01)
    assert abs(exact.omega - 2 * np.pi * 1.51) < 1e-12
    assert abs(exact.k - np.sqrt(exact.omega**2 - 9 * np.pi**2)) < 1e-12


def test_strong_pde_residual():
    exact = manufactured_solution(3, 0.01)
    pts = 0.1 + 0.8 * RNG.random((20, 3))
    cc = curl_curl_fd(exact, pts)
    resid = -exact.omega**2 * exact.E(pts) + cc - 1j * exact.omega * exact.J(pts)
    scale = exact.omega**2 * np.abs(exact.E(pts)).max()
    assert np.abs(resid).max() <= 1e-8 * scale


def test_rejects_resonance_and_evanescent():
    with pytest.raises(ValueError):
        manufactured_solution(3, 0.0)
    with pytest.raises(ValueError):
        manufactured_solution(3, -0.1)


def test_eta_div_zero_for_exact_displacement(cube2, identity_coeffs):
    # E_h a polynomial field, D_h its exact RT_{p+2} image (eps = I)
    def f(x):
        return np.column_stack([x[:, 1], x[:, 2] - x[:, 0], x[:, 0] + 1.0])

    w = sps.build_space(cube2, "N", 1)
    e_h = sps.interpolate(w, f, fdeg=6)
    rt = sps.build_space(cube2, "RT", 3)
    d_h = sps.interpolate(rt, f, fdeg=6)
    n2 = sps.build_space(cube2, "N", 3)
    h_h = sps.DiscreteField(n2, np.zeros(n2.ndof, complex))
    omega = 2.0
    eta_div, eta_curl = local_estimators(e_h, d_h, h_h, identity_coeffs, omega)
    assert np.abs(eta_div).max() < 1e-12

    # with H_h = 0 the curl part is the weighted curl norm of E_h
    from maxwellest.fembasis.quadrature import tet_rule

    rule = tet_rule(6)
    out = sps.element_values(w, e_h.coeffs, rule.points, what=("curls",))
    geo = sps.mesh_geometry(cube2)
    ref = np.sqrt(
        np.einsum("epc,epc,p,e->e", out["curls"], out["curls"].conj(),
                  rule.weights, np.abs(geo["det"])).real
    )
    assert np.abs(eta_curl - ref).max() < 1e-12

    # doubling omega doubles eta_div exactly
    d_half = sps.DiscreteField(rt, 0.5 * d_h.coeffs)
    ed1, _ = local_estimators(e_h, d_half, h_h, identity_coeffs, omega)
    ed2, _ = local_estimators(e_h, d_half, h_h, identity_coeffs, 2 * omega)
    assert np.abs(ed2 - 2 * ed1).max() < 1e-12 * max(ed1.max(), 1.0)


def test_energy_error_zero_field(cube2, identity_coeffs):
    exact = manufactured_solution(1, 0.5)
    w = sps.build_space(cube2, "N", 1, constraint="tangential")
    zero = sps.DiscreteField(w, np.zeros(w.ndof, complex))
    err = energy_error(zero, exact, identity_coeffs)
    assert err > 0


def test_energy_error_quadrature_stability(primal_m1_n2, identity_coeffs):
    sol, exact = primal_m1_n2
    e1 = energy_error(sol.E, exact, identity_coeffs, quad_degree=10)
    e2 = energy_error(sol.E, exact, identity_coeffs, quad_degree=14)
    assert abs(e1 - e2) <= 1e-7 * e2


def test_effectivity_report_cases():
    ones = np.ones(4)
    rep = effectivity_report(ones, 0 * ones, 2 * np.ones(4) / 2, {}, 10, 0.5)
    assert abs(rep.effectivity - 1.0) < 1e-12
    rep0 = effectivity_report(0 * ones, 0 * ones, ones, {}, 10, 0.5)
    assert rep0.effectivity == 0.0
    repnan = effectivity_report(ones, ones, 0 * ones, {}, 10, 0.5)
    assert np.isnan(repnan.effectivity)
    # pythagoras of the report
    rep2 = effectivity_report(2 * ones, 3 * ones, ones, {}, 10, 0.5)
    assert abs(rep2.eta**2 - rep2.eta_div**2 - rep2.eta_curl**2) < 1e-12 * rep2.eta**2
    assert abs(rep2.eta_div**2 - np.sum((2 * ones) ** 2)) < 1e-12
