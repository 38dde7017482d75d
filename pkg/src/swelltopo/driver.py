"""Build solver objects from a :class:`ProblemConfig` and run forward, optimize and fdcheck modes."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import material as mat
from .adjoint import best_errors, fd_check
from .errors import ConfigError, OutputError
from .fem import BoundaryConditions, DesignFields, FESystem, LoadSchedule, NewtonSettings, build_rect_mesh
from .io import write_csv, write_dict_rows, write_pgm, write_text, write_vtk
from .network import default_bandwidth, evaluate as net_evaluate, init_network, load_snapshot, save_snapshot
from .objectives import BlockedForceSpec, ShapeTarget
from .optimizer import (Constraint, ContinuationSchedules, DesignProblem, LoadCase, Objective,
                        OptimizerSettings, optimize)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SWELLTOPO_OUTPUT_ROOT"
COMPONENTS = {"x": 0, "y": 1}


# ------------------------------------------------------------------ building blocks


def output_dir(cfg, root=None):
    root = root or os.environ.get(OUTPUT_ROOT_ENV) or "."
    return Path(root) / cfg.output.directory


def build_mesh(cfg):
    m = cfg.mesh
    mesh = build_rect_mesh(m.nx, m.ny, m.length_m, m.height_m, thickness=m.thickness_m)
    mesh.add_node_set("all", np.arange(mesh.n_nodes))
    tol = 1e-9 * max(m.length_m, m.height_m)
    empty = []
    for b in m.node_sets:
        ids = mesh.nodes_where(lambda x, y, b=b: (x >= b.x_min_m - tol) & (x <= b.x_max_m + tol)
                               & (y >= b.y_min_m - tol) & (y <= b.y_max_m + tol))
        if ids.size == 0:
            empty.append(f"mesh.node_sets: box {b.name!r} contains no nodes")
        mesh.add_node_set(b.name, ids)
    if empty:
        raise ConfigError(empty)
    return mesh


def build_table(cfg):
    return mat.MaterialTable([mat.PhaseProperties(p.name, p.G_pa, dict(p.chi), p.fiber_stiffness_pa)
                              for p in cfg.phases])


def build_solvent(s):
    return mat.SolventEnvironment(mu_dry=s.mu_dry_j_per_mol, mu_wet=s.mu_wet_j_per_mol, mu0=s.mu0_j_per_mol,
                                  molar_volume=s.molar_volume_m3_per_mol, temperature=s.temperature_k)


def build_bcs(cfg):
    return BoundaryConditions(
        dirichlet=[(d.set, COMPONENTS[d.component], d.value_m) for d in cfg.dirichlet],
        neumann=[(t.edge, t.traction_pa) for t in cfg.tractions])


def build_systems(cfg, mesh, newton_tol=None):
    sv = cfg.solver
    newton = NewtonSettings(tolerance=newton_tol or sv.newton_tol, max_iterations=sv.newton_max_iterations,
                            armijo=sv.armijo, backtrack=sv.backtrack, max_backtracks=sv.max_backtracks,
                            abs_floor=sv.newton_abs_floor_n)
    schedule = LoadSchedule(sv.load_steps, sv.load_beta)
    solvents = {s.name: build_solvent(s) for s in cfg.solvents}
    bcs = build_bcs(cfg)
    return {c.name: FESystem(mesh, bcs, solvents[c.solvent], newton, schedule) for c in cfg.load_cases}


def port_selector(mesh, port):
    sel = np.zeros(mesh.n_dofs)
    sel[2 * mesh.nodes_in(port.set) + COMPONENTS[port.component]] = port.sign
    return sel


def layout_phases(cfg, mesh, table):
    """Phase index per element from the crisp layout (later regions win)."""
    lay = cfg.layout
    idx = np.full(mesh.n_elements, table.index(lay.default_phase))
    c = mesh.centroids()
    for r in lay.regions:
        inside = ((c[:, 0] >= r.x_min_m) & (c[:, 0] <= r.x_max_m)
                  & (c[:, 1] >= r.y_min_m) & (c[:, 1] <= r.y_max_m))
        idx[inside] = table.index(r.phase)
    return idx


def layout_theta(cfg):
    return np.deg2rad(cfg.layout.fiber_angle_deg) if cfg.layout is not None else 0.0


def layout_design(cfg, mesh, table, solvent):
    return DesignFields.from_phases(mesh, table, layout_phases(cfg, mesh, table), solvent, theta=layout_theta(cfg))


def build_network(cfg, mesh, table):
    n = cfg.network
    heads = {}
    if "rho" in n.heads:
        heads["rho"] = table.n_phases
    if "theta" in n.heads:
        heads["theta"] = 1
    sigma = n.sigma if n.sigma > 0 else default_bandwidth(max(cfg.mesh.nx, cfg.mesh.ny), n.num_fourier)
    return init_network(cfg.seed, spatial_dim=2, num_fourier=n.num_fourier, heads=heads, hidden=tuple(n.hidden),
                        sigma=sigma, box=mesh.bounding_box())


def shape_target(cfg, mesh, table, systems):
    """Target displacements from a forward solve of the configured layout."""
    o = cfg.objective
    case = next(c for c in cfg.load_cases if c.name == o.case)
    design = layout_design(cfg, mesh, table, case.solvent)
    state = systems[o.case].robust_solve(design)
    nodes = mesh.nodes_in(o.sample_set)
    target = state.u.reshape(-1, 2)[nodes]
    return ShapeTarget.on_mesh(mesh, mesh.nodes[nodes], target)


def build_problem(cfg, newton_tol=None):
    mesh = build_mesh(cfg)
    table = build_table(cfg)
    systems = build_systems(cfg, mesh, newton_tol)
    net = build_network(cfg, mesh, table)
    solvent_of = {c.name: c.solvent for c in cfg.load_cases}
    cases = [LoadCase(c.name, c.solvent, systems[c.name]) for c in cfg.load_cases]

    o = cfg.objective
    if o.kind == "blocked_force":
        objective = Objective("blocked_force", o.case, spec=BlockedForceSpec(port_selector(mesh, o.port)))
    else:
        objective = Objective("shape", o.case, target=shape_target(cfg, mesh, table, systems))

    constraints = []
    for c in cfg.constraints:
        if c.kind == "volume":
            constraints.append(Constraint("volume", c.name, phases=tuple(table.index(p) for p in c.phases),
                                          bound=c.bound))
        elif c.kind == "grayness":
            constraints.append(Constraint("grayness", c.name))
        else:
            constraints.append(Constraint("reaction_floor", c.name, case=c.case,
                                          spec=BlockedForceSpec(port_selector(mesh, c.port)), floor=c.floor_n))

    s, pr = cfg.schedules, cfg.projection
    schedules = ContinuationSchedules(p_start=s.p_start, p_step=s.p_step, p_max=s.p_max, xi_start=s.xi_start,
                                      xi_step=s.xi_step, xi_min=s.xi_min, tau0=s.tau_start, nu=s.tau_growth,
                                      beta_start=pr.beta_start, beta_step=pr.beta_step, beta_max=pr.beta_max)
    fixed_rho = None
    if "rho" not in cfg.network.heads:
        fixed_rho = np.eye(table.n_phases)[layout_phases(cfg, mesh, table)]
    problem = DesignProblem(mesh, table, net, cases, objective, constraints, schedules, q=cfg.interpolation.q,
                            projection=pr.enabled, projection_eta=pr.eta, fixed_rho=fixed_rho,
                            fixed_theta=layout_theta(cfg))
    problem.solvent_of = solvent_of
    return problem


# ------------------------------------------------------------------ artifacts


def echo_config(cfg, out):
    """Write the fully defaulted config and a log of which keys took defaults."""
    header = ["# fully defaulted configuration echoed by swelltopo",
              f"# {len(cfg.defaulted)} keys were filled from defaults (see config_defaults.log)"]
    write_text(out / "config.echo.cfg", "\n".join(header) + "\n" + cfgmod.dumps(cfg))
    write_text(out / "config_defaults.log", "".join(f"defaulted: {k}\n" for k in cfg.defaulted))


def cell_fields(problem, rho, theta, state):
    fields = {f"rho_{name}": rho[:, i] for i, name in enumerate(problem.table.names)}
    fields["phi"] = state.phi_gp.mean(axis=1)
    fields["theta"] = np.asarray(theta).mean(axis=1)
    return fields


def write_design_vtks(out, stem, problem, res, deformed=False):
    for name in problem.case_order:
        st = res.states[name]
        write_vtk(out / f"{stem}_{name}.vtk", problem.mesh, st.u, cell_fields(problem, res.rho, res.theta, st),
                  title=f"{stem} {name}", deformed=deformed)


def resample_grid(box_lo, box_hi, nx, ny):
    """Cell-centred sample points of an ``nx`` by ``ny`` raster over the box, row-major from the bottom."""
    if nx <= 0 or ny <= 0:
        raise ConfigError(f"resample resolution must be positive (got {nx}x{ny})")
    lo, hi = np.asarray(box_lo, float), np.asarray(box_hi, float)
    xs = lo[0] + (np.arange(nx) + 0.5) / nx * (hi[0] - lo[0])
    ys = lo[1] + (np.arange(ny) + 0.5) / ny * (hi[1] - lo[1])
    X, Y = np.meshgrid(xs, ys)
    return np.column_stack([X.ravel(), Y.ravel()])


def resample_network(net, nx, ny, out, stem, phase_names=None):
    """Sample rho and theta on a raster; write a CSV and one PGM per field."""
    pts = resample_grid(net.box_lo, net.box_hi, nx, ny)
    vals = net_evaluate(net, pts)
    header, cols = ["x_m", "y_m"], [pts[:, 0], pts[:, 1]]
    rasters = {}
    if "rho" in vals:
        names = phase_names or [f"phase{i}" for i in range(vals["rho"].shape[1])]
        for i, n in enumerate(names):
            header.append(f"rho_{n}")
            cols.append(vals["rho"][:, i])
            rasters[f"rho_{n}"] = vals["rho"][:, i].reshape(ny, nx)
    if "theta" in vals:
        header.append("theta_rad")
        cols.append(vals["theta"])
        rasters["theta"] = (vals["theta"] / np.pi).reshape(ny, nx)
    write_csv(out / f"{stem}.csv", header, np.column_stack(cols).tolist())
    for name, r in rasters.items():
        write_pgm(out / f"{stem}_{name}.pgm", r)
    return pts, vals


# ------------------------------------------------------------------ modes


@dataclass
class RunReport:
    status: str
    exit_code: int
    out: Path
    message: str = ""


def run_forward(cfg, out):
    mesh = build_mesh(cfg)
    table = build_table(cfg)
    systems = build_systems(cfg, mesh)
    rows = []
    sets = ["all", "left", "right", "bottom", "top"] + [b.name for b in cfg.mesh.node_sets]
    idx = layout_phases(cfg, mesh, table)
    summary = {}
    for c in cfg.load_cases:
        design = layout_design(cfg, mesh, table, c.solvent)
        state = systems[c.name].robust_solve(design)
        U = state.u.reshape(-1, 2)
        fields = {f"rho_{n}": (idx == i).astype(float) for i, n in enumerate(table.names)}
        fields["phi"] = state.phi_gp.mean(axis=1)
        fields["theta"] = design.theta.mean(axis=1)
        write_vtk(out / f"forward_{c.name}.vtk", mesh, state.u, fields, title=f"forward {c.name}", deformed=True)
        for s in sets:
            n = mesh.nodes_in(s)
            rows.append([c.name, s, U[n, 0].mean(), U[n, 1].mean(), np.abs(U[n, 0]).max(), np.abs(U[n, 1]).max()])
        summary[c.name] = {"newton_iterations": state.newton_iterations, "phi_mean": float(state.phi_gp.mean())}
    write_csv(out / "forward_summary.csv",
              ["case", "node_set", "mean_ux_m", "mean_uy_m", "max_abs_ux_m", "max_abs_uy_m"], rows)
    write_text(out / "summary.json", json.dumps({"mode": "forward", "status": "ok", "cases": summary}, indent=2))
    return RunReport("ok", 0, out)


def run_optimize(cfg, out):
    problem = build_problem(cfg)
    op = cfg.optimizer
    settings = OptimizerSettings(max_iterations=op.max_iterations, loss_tol=op.loss_tol, window=op.loss_window,
                                 lr=op.learning_rate, clip_norm=op.clip_norm,
                                 snapshot_every=cfg.output.snapshot_every)
    snaps = (out / "snapshots")
    names = problem.table.names
    history = []

    def snapshot(k, res, w):
        problem.net.w, keep = w, problem.net.w
        save_snapshot(problem.net, snaps / f"snapshot_{k:04d}.txt", extra={"iteration": k, "phases": names})
        problem.net.w = keep
        write_design_vtks(snaps, f"design_{k:04d}", problem, res)

    def callback(k, row, res, w):
        history.append(row)
        write_dict_rows(out / "history.csv", history)
        every = cfg.output.snapshot_every
        if every and k % every == 0:
            snapshot(k, res, w)

    result = optimize(problem, settings, callback=callback)
    write_csv(out / "timing.csv", ["iteration", "wall_s"], list(enumerate(result.wall_times)))
    last_k = len(result.history) - 1
    if result.last is not None:
        every = cfg.output.snapshot_every
        if not (every and last_k % every == 0):
            snapshot(last_k, result.last, result.w)
        save_snapshot(problem.net, out / "final_weights.txt", extra={"iteration": last_k, "phases": names})
        write_design_vtks(out, "final", problem, result.last)
        nx = cfg.output.resample_nx or 2 * cfg.mesh.nx
        ny = cfg.output.resample_ny or 2 * cfg.mesh.ny
        resample_network(problem.net, nx, ny, out, f"final_resampled_{nx}x{ny}", names)
    summary = {"mode": "optimize", "status": result.status, "message": result.message,
               "iterations": len(result.history), "n_params": int(problem.net.n_params),
               "feasible": result.feasible,
               "final": result.history[-1] if result.history else None}
    write_text(out / "summary.json", json.dumps(summary, indent=2, default=float))
    code = {"forward_failure": 3, "adjoint_failure": 4}.get(result.status, 0)
    message = "; ".join(m for m in (result.message, "feasible" if result.feasible else "infeasible") if m)
    return RunReport(result.status, code, out, message)


def run(cfg, root=None):
    out = output_dir(cfg, root)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create {out}: {exc}") from exc
    echo_config(cfg, out)
    if cfg.mode == "forward":
        return run_forward(cfg, out)
    return run_optimize(cfg, out)


def run_fdcheck(cfg, root=None, tolerance=1e-5):
    out = output_dir(cfg, root)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    fd = cfg.fdcheck
    problem = build_problem(cfg, newton_tol=fd.newton_tol)
    cont = problem.schedules.at(fd.iteration)
    rows = fd_check(problem, seed=fd.seed, hs=tuple(fd.steps), n_components=fd.components, cont=cont,
                    csv_path=None)
    write_csv(out / "fd_check.csv", ["h", "component", "adjoint", "fd", "rel_error"], rows)
    best = best_errors(rows)
    worst = max(best.values())
    ok = worst < tolerance
    return RunReport("ok" if ok else "mismatch", 0 if ok else 1, out,
                     f"{len(best)} components, worst best-over-h relative error {worst:.3e}")


def run_resample(snapshot_path, nx, ny, out=None):
    path = Path(snapshot_path)
    try:
        net = load_snapshot(path)
    except (OSError, ValueError, KeyError) as exc:
        raise OutputError(f"cannot read snapshot {path}: {exc}") from exc
    phases = net.init_record.get("extra", {}).get("phases")
    out = Path(out) if out else path.parent
    resample_network(net, nx, ny, out, f"{path.stem}_resampled_{nx}x{ny}", phases)
    return RunReport("ok", 0, out)
