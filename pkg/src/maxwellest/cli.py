"""Experiment driver: configuration, convergence series, CSV/plot output.

Runs solve -> equilibrate -> verify -> estimate over a mesh series and
writes one CSV row per mesh with the exact header

    h,ndof,err,est,eta_div,eta_curl,eff,curl_res,div_res,time

Numbers are written with repr (shortest round-trip), so parsing the file
reproduces the rows bit-exactly; apart from the wall-time column two runs
of the same configuration produce identical bytes.
"""

import argparse
import json
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import EquilibrationError, SolverFailure
from .estimate import (
    effectivity_report,
    energy_error,
    local_estimators,
    manufactured_solution,
)
from .equilibrate import equilibrate_fields
from .maxwell import solve_maxwell
from .mesh import CoefficientField, build_topology, generate_structured_cube, load_gmsh, mesh_stats

CSV_HEADER = "h,ndof,err,est,eta_div,eta_curl,eff,curl_res,div_res,time"


@dataclass
class ExperimentConfig:
    """Validated description of one convergence study."""

    m: int
    delta: float
    p: int = 1
    mesh_ns: tuple = ()
    mesh_files: tuple = ()
    coefficients: CoefficientField = None
    solver_tol: float = 1e-10
    quad_bump: int = 0
    out: str = None
    threads: int = 1
    zero_current: bool = False
    plot: str = None

    def __post_init__(self):
        if self.p not in (1, 2, 3):
            raise ValueError(f"p must be 1, 2 or 3, got {self.p}")
        if self.delta <= 0:
            raise ValueError(
                f"delta must be > 0, got {self.delta} (delta = 0 is a resonance "
                "frequency; solves there are rejected)"
            )
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if not self.mesh_ns and not self.mesh_files:
            raise ValueError("no meshes: give structured n values or mesh files")
        if self.mesh_ns and list(self.mesh_ns) != sorted(set(self.mesh_ns)):
            raise ValueError("structured n list must be strictly increasing")
        if self.coefficients is None:
            self.coefficients = CoefficientField.identity()
            # marker: adapt to whatever regions a loaded mesh carries
            self.coefficients._default_identity = True


def _coefficients_from_json(entry):
    if entry in (None, "identity"):
        return None
    regions = entry.get("regions", {})
    eps, chi = {}, {}
    for key, val in regions.items():
        eps[int(key)] = np.asarray(val["eps"], dtype=float)
        chi[int(key)] = np.asarray(val.get("chi", np.eye(3)), dtype=float)
    return CoefficientField(eps=eps, chi=chi)


def _parse_mesh_arg(text):
    if text.startswith("n="):
        try:
            return tuple(int(v) for v in text[2:].split(",")), ()
        except ValueError:
            raise ValueError(f"bad mesh list {text!r}, expected n=2,4,...")
    return (), tuple(text.split(","))


def parse_config(argv=None):
    """Build an ExperimentConfig from a JSON file and/or command-line flags.

    Flags override file values.  A missing required field is reported by
    name.
    """
    parser = argparse.ArgumentParser(
        prog="maxwellest",
        description="Time-harmonic Maxwell solver with equilibrated error "
        "estimation: convergence/effectivity studies on the unit cube.",
    )
    parser.add_argument("config", nargs="?", help="JSON configuration file")
    parser.add_argument("--p", type=int, help="Nedelec degree (1..3)")
    parser.add_argument("--m", type=int, help="mode number of the manufactured solution")
    parser.add_argument("--delta", type=float, help="frequency offset from resonance")
    parser.add_argument(
        "--mesh",
        help="mesh series: 'n=2,4,8' for structured cubes or comma-separated "
        "Gmsh files",
    )
    parser.add_argument("--out", help="CSV output path")
    parser.add_argument("--tol", type=float, help="solver residual tolerance")
    parser.add_argument("--quad-bump", type=int, help="extra quadrature degree")
    parser.add_argument("--threads", type=int, help="thread count (results are "
                        "independent of it)")
    parser.add_argument("--zero-current", action="store_true",
                        help="test hook: run with J = 0")
    parser.add_argument("--plot", help="write a log-log convergence plot (SVG)")
    args = parser.parse_args(argv)

    data = {}
    if args.config:
        with open(args.config) as f:
            data = json.load(f)
    mesh_ns = tuple(data.get("mesh", {}).get("n", ()))
    mesh_files = tuple(data.get("mesh", {}).get("files", ()))
    if args.mesh:
        try:
            mesh_ns, mesh_files = _parse_mesh_arg(args.mesh)
        except ValueError as exc:
            parser.error(str(exc))

    def pick(flag, key, default=None):
        return flag if flag is not None else data.get(key, default)

    m = pick(args.m, "m")
    if m is None:
        parser.error("missing required field: m")
    delta = pick(args.delta, "delta")
    if delta is None:
        parser.error("missing required field: delta")
    try:
        return ExperimentConfig(
            m=int(m),
            delta=float(delta),
            p=int(pick(args.p, "p", 1)),
            mesh_ns=mesh_ns,
            mesh_files=mesh_files,
            coefficients=_coefficients_from_json(data.get("coefficients")),
            solver_tol=float(pick(args.tol, "solver_tol", 1e-10)),
            quad_bump=int(pick(args.quad_bump, "quad_bump", 0)),
            out=pick(args.out, "out"),
            threads=int(pick(args.threads, "threads", 1)),
            zero_current=bool(args.zero_current or data.get("zero_current", False)),
            plot=pick(args.plot, "plot"),
        )
    except ValueError as exc:
        parser.error(str(exc))


@dataclass
class ResultRow:
    h: float
    ndof: int
    err: float
    est: float
    eta_div: float
    eta_curl: float
    eff: float
    curl_res: float
    div_res: float
    time: float

    def as_csv(self):
        vals = [self.h, self.ndof, self.err, self.est, self.eta_div,
                self.eta_curl, self.eff, self.curl_res, self.div_res, self.time]
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in vals)


@dataclass
class StudyResult:
    rows: list
    failures: list = field(default_factory=list)
    reports: list = field(default_factory=list)


class _ZeroSolution:
    """Exact solution stub for the J = 0 test hook."""

    def __init__(self, m, delta):
        ref = manufactured_solution(m, delta)
        self.m, self.delta, self.omega, self.k = ref.m, ref.delta, ref.omega, ref.k

    def E(self, x):
        return np.zeros((np.atleast_2d(x).shape[0], 3), dtype=complex)

    curl_E = E
    J = E


_LAST_MESH_SIG = [None]


def run_single(config, mesh):
    """Solve/equilibrate/estimate one mesh; returns (row, report).

    Patch operator caches only ever hit for reruns on the same mesh
    (frequency sweeps), so they are dropped whenever the mesh changes to
    keep the peak memory of large series bounded.
    """
    from .equilibrate.reconstruct import clear_ops_cache

    sig = (mesh.ntets, mesh.nvertices, mesh.vertices[-1].tobytes())
    if _LAST_MESH_SIG[0] != sig:
        clear_ops_cache()
        _LAST_MESH_SIG[0] = sig
    if getattr(config.coefficients, "_default_identity", False):
        regions = np.unique(mesh.region_of_tet)
        if any(int(r) not in config.coefficients.eps for r in regions):
            config.coefficients = CoefficientField.identity(regions)
            config.coefficients._default_identity = True
    exact = (
        _ZeroSolution(config.m, config.delta)
        if config.zero_current
        else manufactured_solution(config.m, config.delta)
    )
    t0 = time.perf_counter()
    topo = build_topology(mesh)
    sol = solve_maxwell(
        topo, config.p, exact.omega, config.coefficients, exact.J,
        tol=config.solver_tol,
    )
    eq = equilibrate_fields(sol, with_jumps=False)
    bump = config.quad_bump
    eta_div_k, eta_curl_k = local_estimators(
        sol.E, eq.D, eq.H, config.coefficients, exact.omega,
        quad_degree=2 * (config.p + 2) + 2 + bump,
    )
    err_k = energy_error(
        sol.E, exact, config.coefficients, per_element=True,
        quad_degree=max(2 * config.p + 4, 10) + bump,
    )
    report = effectivity_report(
        eta_div_k, eta_curl_k, err_k, eq.residuals, sol.ndof,
        mesh_stats(mesh)["h"],
    )
    wall = time.perf_counter() - t0
    row = ResultRow(
        h=report.h,
        ndof=report.ndof,
        err=report.error,
        est=report.eta,
        eta_div=report.eta_div,
        eta_curl=report.eta_curl,
        eff=report.effectivity,
        curl_res=report.curl_residual,
        div_res=report.div_residual,
        time=wall,
    )
    return row, report


def run_convergence_study(config, log=None):
    """Run the configured mesh series; failures are recorded, not fatal."""
    log = log or (lambda msg: print(msg, file=sys.stderr, flush=True))
    result = StudyResult(rows=[])
    meshes = [("structured", n) for n in config.mesh_ns] + [
        ("file", f) for f in config.mesh_files
    ]
    for kind, spec in meshes:
        label = f"n={spec}" if kind == "structured" else str(spec)
        mesh = (
            generate_structured_cube(spec)
            if kind == "structured"
            else load_gmsh(spec)
        )
        try:
            row, report = run_single(config, mesh)
        except (SolverFailure, EquilibrationError) as exc:
            log(f"mesh {label}: failed ({exc}); continuing")
            result.failures.append((label, str(exc)))
            continue
        result.rows.append(row)
        result.reports.append(report)
        log(
            f"mesh {label}: h={row.h:.4g} ndof={row.ndof} err={row.err:.4e} "
            f"est={row.est:.4e} eff={row.eff:.4f} ({row.time:.1f}s)"
        )
    if config.out:
        write_csv(config.out, result.rows)
        log(f"wrote {config.out}")
    if config.plot:
        plot_svg(config.plot, result.rows)
        log(f"wrote {config.plot}")
    return result


def write_csv(path, rows):
    with open(path, "w", newline="") as f:
        f.write(CSV_HEADER + "\n")
        for row in rows:
            f.write(row.as_csv() + "\n")


def read_csv(path):
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header!r}")
        for line in f:
            parts = line.strip().split(",")
            rows.append(
                ResultRow(
                    h=float(parts[0]),
                    ndof=int(parts[1]),
                    err=float(parts[2]),
                    est=float(parts[3]),
                    eta_div=float(parts[4]),
                    eta_curl=float(parts[5]),
                    eff=float(parts[6]),
                    curl_res=float(parts[7]),
                    div_res=float(parts[8]),
                    time=float(parts[9]),
                )
            )
    return rows


@dataclass
class RateSummary:
    err_slopes: list
    est_slopes: list

    @property
    def err_range(self):
        return (min(self.err_slopes), max(self.err_slopes))

    @property
    def est_range(self):
        return (min(self.est_slopes), max(self.est_slopes))


def compute_rates(rows):
    """Per-interval slopes log(e_i/e_{i+1}) / log(h_i/h_{i+1})."""
    rows = [r for r in rows if np.isfinite(r.err) and r.err > 0]
    if len(rows) < 2:
        raise ValueError("insufficient data: need at least two successful rows")
    err_slopes, est_slopes = [], []
    for a, b in zip(rows, rows[1:]):
        denom = np.log(a.h / b.h)
        err_slopes.append(float(np.log(a.err / b.err) / denom))
        est_slopes.append(float(np.log(a.est / b.est) / denom))
    return RateSummary(err_slopes=err_slopes, est_slopes=est_slopes)


def plot_svg(path, rows):
    """Log-log convergence chart of error and estimator against h."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    h = [r.h for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(h, [r.err for r in rows], "o-", label="error")
    ax.loglog(h, [r.est for r in rows], "s--", label="estimator")
    ax.set_xlabel("h")
    ax.invert_xaxis()
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def main(argv=None):
    config = parse_config(argv)
    result = run_convergence_study(config)
    for row in result.rows:
        print(row.as_csv())
    if len(result.rows) >= 2:
        rates = compute_rates(result.rows)
        print(f"# err slopes: {['%.3f' % s for s in rates.err_slopes]}")
        print(f"# est slopes: {['%.3f' % s for s in rates.est_slopes]}")
    if result.failures:
        print(f"# {len(result.failures)} mesh(es) failed", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
