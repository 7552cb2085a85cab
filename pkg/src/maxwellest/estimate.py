"""Estimator evaluation, manufactured solutions and effectivity reporting."""

from dataclasses import dataclass, field

import numpy as np

from .fembasis.quadrature import tet_rule
from .maxwell import _weighted_sq
from .spaces import element_values, mesh_geometry


@dataclass
class ExactSolution:
    """Closed-form cavity solution driven by J = sin(m pi x3) e2.

    The frequency is w = 2 pi (m/2 + delta) with delta the offset from the
    resonance at delta = 0, and k = sqrt(w^2 - (m pi)^2).  The stored field
    carries the i*w factor that makes the strong equation
    -w^2 E + curl curl E = i w J hold exactly (unit materials).
    """

    m: int
    delta: float
    omega: float = field(init=False)
    k: float = field(init=False)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("mode number m must be >= 1")
        if self.delta == 0:
            raise ValueError("delta = 0 is a resonance frequency; rejected")
        self.omega = 2.0 * np.pi * (self.m / 2.0 + self.delta)
        ksq = self.omega**2 - (self.m * np.pi) ** 2
        if ksq <= 0:
            raise ValueError(
                f"omega = {self.omega:.6g} <= m pi: evanescent regime rejected"
            )
        self.k = float(np.sqrt(ksq))

    # profile f(x1) and derivatives; E = i w f(x1) sin(m pi x3) e2
    def _profile(self, x1):
        k = self.k
        a = (np.cos(k) - 1.0) / np.sin(k)
        return ((np.cos(k * x1) - 1.0) - a * np.sin(k * x1)) / k**2

    def _profile_d1(self, x1):
        k = self.k
        a = (np.cos(k) - 1.0) / np.sin(k)
        return (-k * np.sin(k * x1) - a * k * np.cos(k * x1)) / k**2

    def E(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((x.shape[0], 3), dtype=complex)
        out[:, 1] = (
            1j * self.omega * self._profile(x[:, 0]) * np.sin(self.m * np.pi * x[:, 2])
        )
        return out

    def curl_E(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((x.shape[0], 3), dtype=complex)
        s = np.sin(self.m * np.pi * x[:, 2])
        c = np.cos(self.m * np.pi * x[:, 2])
        out[:, 0] = -1j * self.omega * self._profile(x[:, 0]) * self.m * np.pi * c
        out[:, 2] = 1j * self.omega * self._profile_d1(x[:, 0]) * s
        return out

    def J(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((x.shape[0], 3), dtype=complex)
        out[:, 1] = np.sin(self.m * np.pi * x[:, 2])
        return out


def manufactured_solution(m, delta):
    """Exact cavity solution for mode m at frequency offset delta."""
    if delta <= 0:
        raise ValueError("delta must be positive (delta = 0 is a resonance)")
    return ExactSolution(m=int(m), delta=float(delta))


@dataclass
class EstimatorReport:
    """Per-element and global estimator, error and effectivity summary."""

    eta_div_K: np.ndarray
    eta_curl_K: np.ndarray
    error_K: np.ndarray
    eta_div: float
    eta_curl: float
    eta: float
    error: float
    effectivity: float
    curl_residual: float
    div_residual: float
    max_jump_div: float
    max_jump_curl: float
    ndof: int
    h: float

    @property
    def eta_K(self):
        return np.sqrt(self.eta_div_K**2 + self.eta_curl_K**2)


def local_estimators(e_field, d_field, h_field, coeffs, omega, quad_degree=None):
    """Per-element eta_div,K = w |E_h - eps^-1 D_h|_eps,K and
    eta_curl,K = |curl E_h - i w chi^-1 H_h|_chi,K."""
    topo = e_field.space.topo
    p = e_field.space.degree
    deg = quad_degree if quad_degree is not None else 2 * (p + 2) + 2
    rule = tet_rule(deg)
    geo = mesh_geometry(topo)
    regions = topo.mesh.region_of_tet
    eps = coeffs.eps_of(regions)
    chi = coeffs.chi_of(regions)
    eps_inv = np.linalg.inv(eps)
    chi_inv = np.linalg.inv(chi)
    dets = geo["det"]
    ntet = topo.mesh.ntets
    eta_div = np.zeros(ntet)
    eta_curl = np.zeros(ntet)
    chunk = max(1, 1_500_000 // (rule.npoints * 3))
    for start in range(0, ntet, chunk):
        eids = np.arange(start, min(start + chunk, ntet))
        ev = element_values(
            e_field.space, e_field.coeffs, rule.points, eids, ("values", "curls")
        )
        dv = element_values(d_field.space, d_field.coeffs, rule.points, eids,
                            ("values",))
        hv = element_values(h_field.space, h_field.coeffs, rule.points, eids,
                            ("values",))
        diff = ev["values"] - np.einsum("edc,epc->epd", eps_inv[eids], dv["values"])
        eta_div[eids] = omega**2 * _weighted_sq(
            diff, eps[eids], rule.weights, dets[eids]
        )
        diffc = ev["curls"] - 1j * omega * np.einsum(
            "edc,epc->epd", chi_inv[eids], hv["values"]
        )
        eta_curl[eids] = _weighted_sq(diffc, chi[eids], rule.weights, dets[eids])
    return np.sqrt(eta_div), np.sqrt(eta_curl)


def energy_error(e_field, exact, coeffs, omega=None, quad_degree=None,
                 per_element=False):
    """Energy-norm distance between E_h and the analytic solution.

    The analytic field is evaluated directly at the quadrature points
    (degree max(2p+4, 10)), never interpolated.
    """
    space = e_field.space
    topo = space.topo
    p = space.degree
    omega = exact.omega if omega is None else omega
    deg = quad_degree if quad_degree is not None else max(2 * p + 4, 10)
    rule = tet_rule(deg)
    geo = mesh_geometry(topo)
    regions = topo.mesh.region_of_tet
    eps = coeffs.eps_of(regions)
    chi = coeffs.chi_of(regions)
    out = np.zeros(topo.mesh.ntets)
    chunk = max(1, 1_500_000 // (rule.npoints * 3))
    for start in range(0, topo.mesh.ntets, chunk):
        eids = np.arange(start, min(start + chunk, topo.mesh.ntets))
        pts = (
            np.einsum("edc,pc->epd", geo["B"][eids], rule.points)
            + geo["origin"][eids][:, None, :]
        )
        flat = pts.reshape(-1, 3)
        ev = element_values(space, e_field.coeffs, rule.points, eids,
                            ("values", "curls"))
        dv = ev["values"] - exact.E(flat).reshape(eids.size, -1, 3)
        dc = ev["curls"] - exact.curl_E(flat).reshape(eids.size, -1, 3)
        out[eids] = omega**2 * _weighted_sq(
            dv, eps[eids], rule.weights, geo["det"][eids]
        )
        out[eids] += _weighted_sq(dc, chi[eids], rule.weights, geo["det"][eids])
    per = np.sqrt(out)
    if per_element:
        return per
    return float(np.sqrt(out.sum()))


def effectivity_report(eta_div_K, eta_curl_K, error_K, residuals, ndof, h):
    """Assemble the report; no recomputation happens here."""
    eta_div = float(np.sqrt(np.sum(eta_div_K**2)))
    eta_curl = float(np.sqrt(np.sum(eta_curl_K**2)))
    eta = float(np.sqrt(eta_div**2 + eta_curl**2))
    err = float(np.sqrt(np.sum(np.asarray(error_K) ** 2)))
    eff = eta / err if err > 0 else float("nan")
    return EstimatorReport(
        eta_div_K=np.asarray(eta_div_K),
        eta_curl_K=np.asarray(eta_curl_K),
        error_K=np.asarray(error_K),
        eta_div=eta_div,
        eta_curl=eta_curl,
        eta=eta,
        error=err,
        effectivity=eff,
        curl_residual=residuals.get("curl_residual", float("nan")),
        div_residual=residuals.get("div_residual", float("nan")),
        max_jump_div=residuals.get("max_jump_div", float("nan")),
        max_jump_curl=residuals.get("max_jump_curl", float("nan")),
        ndof=int(ndof),
        h=float(h),
    )
