"""Design problem assembly and the Adam-driven optimization loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import material as mat
from .adjoint import AdjointWorkspace, case_sensitivity
from .errors import BracketError, NonConvergenceError, SwellTopoError
from .fem import DesignFields, FESystem
from .network import DesignNetwork, evaluate as net_evaluate, pullback
from .objectives import (BlockedForceSpec, ShapeTarget, barrier, barrier_derivative, constraint_grayness,
                         constraint_volume, grayness, objective_blocked_force, objective_shape_morphing)

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ schedules


@dataclass(frozen=True)
class ContinuationSchedules:
    p_start: float = 1.0
    p_step: float = 0.05
    p_max: float = 3.0
    xi_start: float = 2.0
    xi_step: float = 0.05
    xi_min: float = 0.05
    tau0: float = 3.0
    nu: float = 1.03
    beta_start: float = 1.0
    beta_step: float = 0.0
    beta_max: float = 1.0

    def at(self, k):
        return Continuation(
            p=min(self.p_start + self.p_step * k, self.p_max),
            xi=max(self.xi_start - self.xi_step * k, self.xi_min),
            tau=self.tau0 * self.nu**k,
            beta_proj=min(self.beta_start + self.beta_step * k, self.beta_max),
        )

    def settled(self, k, grayness_active=True, projection_active=False):
        c = self.at(k)
        done = c.p >= self.p_max or self.p_step == 0
        if grayness_active:
            done &= c.xi <= self.xi_min or self.xi_step == 0
        if projection_active:
            done &= c.beta_proj >= self.beta_max or self.beta_step == 0
        return done


@dataclass(frozen=True)
class Continuation:
    p: float = 3.0
    xi: float = 0.05
    tau: float = 3.0
    beta_proj: float = 1.0


# ------------------------------------------------------------------ projection


def _log_cosh(y):
    y = np.abs(y)
    return y + np.log1p(np.exp(-2.0 * y))


def _projection_logs(rho, beta, eta):
    # (tanh(b*eta) + tanh(b*(r - eta))) is proportional to sinh(b*r) / cosh(b*(r - eta)), with a
    # factor shared by all phases; working with its log keeps rows finite when every phase sits
    # below the threshold and the tanh terms round to -1
    x = beta * rho
    with np.errstate(divide="ignore"):
        log_sinh = x + np.log(-np.expm1(-2.0 * x))
    return log_sinh - _log_cosh(beta * (rho - eta))


def threshold_projection(rho, beta, eta=0.5):
    """Smooth-ramp projection of each phase, renormalized to sum to one."""
    rho = np.asarray(rho, float)
    lw = _projection_logs(rho, beta, eta)
    e = np.exp(lw - lw.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def threshold_projection_vjp(rho, beta, eta, cot):
    rho = np.asarray(rho, float)
    lw = _projection_logs(rho, beta, eta)
    top = lw.max(axis=-1, keepdims=True)
    e = np.exp(lw - top)
    S = e.sum(axis=-1, keepdims=True)
    p = e / S
    # p * d(log w)/d rho, with p * coth(b*rho) evaluated without the 0 * inf at rho = 0
    p_coth = np.exp(_log_cosh(beta * rho) - _log_cosh(beta * (rho - eta)) - top) / S
    pl = beta * (p_coth - p * np.tanh(beta * (rho - eta)))
    cot = np.asarray(cot, float)
    return pl * (cot - np.sum(cot * p, axis=-1, keepdims=True))


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    lr: float = 5e-3
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0


def clip_by_global_norm(g, max_norm):
    n = np.linalg.norm(g)
    return g * (max_norm / n) if n > max_norm else g


def adam_step(state: AdamState, w, grad):
    """Clip to the global norm, then one bias-corrected Adam update. Returns new weights."""
    grad = np.asarray(grad, float)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient passed to the optimizer")
    if state.m is None:
        state.m = np.zeros_like(w)
        state.v = np.zeros_like(w)
    g = clip_by_global_norm(grad, state.clip_norm)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = state.m / (1 - state.beta1**state.t)
    vhat = state.v / (1 - state.beta2**state.t)
    return w - state.lr * mhat / (np.sqrt(vhat) + state.eps)


# ------------------------------------------------------------------ problem definition


@dataclass
class LoadCase:
    name: str
    solvent: str
    system: FESystem


@dataclass
class Objective:
    kind: str                       # "shape" or "blocked_force"
    case: str
    target: ShapeTarget | None = None
    spec: BlockedForceSpec | None = None

    @property
    def sign(self):
        # blocked force is maximized
        return -1.0 if self.kind == "blocked_force" else 1.0


@dataclass
class Constraint:
    kind: str                       # "volume", "grayness" or "reaction_floor"
    name: str
    phases: tuple = ()
    bound: float = 1.0
    case: str = ""
    spec: BlockedForceSpec | None = None
    floor: float = 0.0


@dataclass
class EvalResult:
    loss: float
    J_raw: float
    J0: float
    g: dict
    grayness: float
    gradient: np.ndarray | None
    newton_iterations: dict
    states: dict
    rho: np.ndarray
    theta: np.ndarray
    adjoint_residual: float = 0.0


class DesignProblem:
    """Network weights -> pseudodensities -> forward solves -> loss, with the adjoint gradient."""

    def __init__(self, mesh, table: mat.MaterialTable, net: DesignNetwork, cases, objective: Objective,
                 constraints=(), schedules: ContinuationSchedules | None = None, q=1.0,
                 projection=False, projection_eta=0.5, fixed_rho=None, fixed_theta=0.0):
        self.mesh = mesh
        self.table = table
        self.net = net
        self.cases = {c.name: c for c in cases}
        self.case_order = [c.name for c in cases]
        self.objective = objective
        self.constraints = list(constraints)
        self.schedules = schedules or ContinuationSchedules()
        self.q = q
        self.projection = projection
        self.projection_eta = projection_eta
        self.fixed_rho = None if fixed_rho is None else np.asarray(fixed_rho, float)
        self.fixed_theta = fixed_theta
        self.centroids = mesh.centroids()
        self.gauss_points = mesh.gauss_points().reshape(-1, 2)
        self.volumes = mesh.element_areas()
        if "rho" not in net.heads and self.fixed_rho is None:
            raise ValueError("network has no density head and no fixed layout was given")
        for c in self.constraints:
            if c.kind == "reaction_floor":
                c.spec.check(self.cases[c.case].system)
        if objective.kind == "blocked_force":
            objective.spec.check(self.cases[objective.case].system)
        lo, hi = mesh.bounding_box()
        self.force_scale = float(table.moduli().max() * mesh.thickness * np.max(hi - lo))

    @property
    def has_grayness(self):
        return any(c.kind == "grayness" for c in self.constraints)

    def sample(self, w, cont: Continuation):
        """Pseudodensities at centroids (after optional projection) and fiber angles at Gauss points."""
        if "rho" in self.net.heads:
            rho_raw = net_evaluate(self.net, self.centroids, w)["rho"]
        else:
            rho_raw = self.fixed_rho
        rho = threshold_projection(rho_raw, cont.beta_proj, self.projection_eta) if self.projection else rho_raw
        if "theta" in self.net.heads:
            theta = net_evaluate(self.net, self.gauss_points, w)["theta"].reshape(-1, 4)
        else:
            theta = np.broadcast_to(np.asarray(self.fixed_theta, float), (self.mesh.n_elements, 4)).copy()
        return rho_raw, rho, theta

    def design_fields(self, rho, theta, solvent, p):
        props = mat.interpolate(rho, self.table, mat.InterpolationParams(p=p, q=self.q), solvent)
        return DesignFields(props.G, props.chi, props.eta, theta)

    def solve_case(self, case: LoadCase, design: DesignFields):
        """Forward solve; retried with more load steps on failure."""
        return case.system.robust_solve(design)

    def evaluate(self, w, cont: Continuation | None = None, J0=None, need_grad=True) -> EvalResult:
        cont = cont or self.schedules.at(0)
        rho_raw, rho, theta = self.sample(w, cont)
        states, designs, iters = {}, {}, {}
        for name in self.case_order:
            case = self.cases[name]
            designs[name] = self.design_fields(rho, theta, case.solvent, cont.p)
            states[name] = self.solve_case(case, designs[name])
            iters[name] = int(sum(states[name].newton_iterations))

        ndof = self.mesh.n_dofs
        c_u = {n: np.zeros(ndof) for n in self.case_order}
        c_f = {n: np.zeros(ndof) for n in self.case_order}
        cot_rho = np.zeros_like(rho)

        obj = self.objective
        st = states[obj.case]
        if obj.kind == "shape":
            J_raw, dJ_du = objective_shape_morphing(st.u, obj.target)
            dJ_df = None
        else:
            J_raw, dJ_df = objective_blocked_force(st.assembly.f_int, obj.spec)
            dJ_du = None
        if J0 is None:
            J0 = max(abs(J_raw), 1e-8 * self.force_scale if obj.kind == "blocked_force" else 1e-30)
        coef = obj.sign / J0
        loss = obj.sign * J_raw / J0
        if dJ_du is not None:
            c_u[obj.case] += coef * dJ_du
        if dJ_df is not None:
            c_f[obj.case] += coef * dJ_df

        gvals = {}
        for c in self.constraints:
            if c.kind == "volume":
                g, dg = constraint_volume(rho, self.volumes, c.phases, c.bound)
            elif c.kind == "grayness":
                g, dg = constraint_grayness(rho, cont.xi)
            elif c.kind == "reaction_floor":
                F, l = objective_blocked_force(states[c.case].assembly.f_int, c.spec)
                g = c.floor - F
                dg = None
            else:
                raise ValueError(f"unknown constraint kind {c.kind!r}")
            gvals[c.name] = g
            loss += barrier(g, cont.tau)
            if need_grad:
                db = barrier_derivative(g, cont.tau)
                if c.kind == "reaction_floor":
                    c_f[c.case] -= db * l
                else:
                    cot_rho += db * dg

        gradient = None
        adj_res = 0.0
        if need_grad:
            cot_theta = np.zeros_like(theta)
            params = mat.InterpolationParams(p=cont.p, q=self.q)
            # contributions are merged in definition order, whatever order the solves ran in
            for name in self.cases:
                if not (np.any(c_u[name]) or np.any(c_f[name])):
                    continue
                ws = AdjointWorkspace(self.cases[name].system, states[name])
                (dG, dchi, deta, dth), _ = case_sensitivity(ws, c_u[name], c_f[name])
                adj_res = max(adj_res, getattr(ws, "last_residual", 0.0))
                pG, pchi, peta = mat.interpolate_partials(rho, self.table, params, self.cases[name].solvent)
                cot_rho += dG[:, None] * pG + dchi[:, None] * pchi + deta[:, None] * peta
                cot_theta += dth
            if self.projection:
                cot_rho = threshold_projection_vjp(rho_raw, cont.beta_proj, self.projection_eta, cot_rho)
            gradient = np.zeros_like(w)
            if "rho" in self.net.heads:
                gradient += pullback(self.net, self.centroids, cot_rho=cot_rho, w=w)
            if "theta" in self.net.heads:
                gradient += pullback(self.net, self.gauss_points, cot_theta=cot_theta.ravel(), w=w)

        return EvalResult(loss=float(loss), J_raw=float(J_raw), J0=float(J0), g=gvals, grayness=grayness(rho_raw),
                          gradient=gradient, newton_iterations=iters, states=states, rho=rho, theta=theta,
                          adjoint_residual=adj_res)


# ------------------------------------------------------------------ loop


@dataclass
class OptimizerSettings:
    max_iterations: int = 250
    loss_tol: float = 1e-3
    window: int = 5
    lr: float = 5e-3
    clip_norm: float = 1.0
    snapshot_every: int = 0
    max_halvings: int = 4     # retries with half the last weight update after a failed forward solve


@dataclass
class OptimizationResult:
    history: list
    w: np.ndarray
    status: str
    message: str = ""
    last: EvalResult | None = None
    wall_times: list = field(default_factory=list)
    feasible: bool = False


FEASIBLE_GRAYNESS = 0.05
FEASIBLE_VOLUME = 1e-3


def is_feasible(res: EvalResult, problem: DesignProblem):
    """Acceptance test for a final design: near-binary and within every volume bound."""
    vols = [res.g[c.name] for c in problem.constraints if c.kind == "volume"]
    return bool(res.grayness <= FEASIBLE_GRAYNESS and all(g <= FEASIBLE_VOLUME for g in vols))


def history_row(k, res: EvalResult, cont: Continuation, problem: DesignProblem):
    row = {"iteration": k, "loss": res.loss, "J": res.J_raw, "J0": res.J0}
    for name, g in res.g.items():
        row[f"g_{name}"] = g
    row.update(grayness=res.grayness, tau=cont.tau, p=cont.p, xi=cont.xi, beta_proj=cont.beta_proj)
    for name in problem.case_order:
        row[f"newton_{name}"] = res.newton_iterations[name]
    return row


def optimize(problem: DesignProblem, settings: OptimizerSettings | None = None, callback=None):
    """Run the outer loop until the iteration cap or a settled, flat loss.

    The loss-change test only starts once every continuation schedule in use
    has reached its final value.  ``callback(k, row, result, w)`` is called
    after each logged iteration.
    """
    settings = settings or OptimizerSettings()
    w = problem.net.w.copy()
    adam = AdamState(lr=settings.lr, clip_norm=settings.clip_norm)
    history, walls = [], []
    J0 = None
    losses = []
    res = None
    w_eval = w
    status, message = "max_iterations", ""
    for k in range(settings.max_iterations):
        t0 = time.perf_counter()
        cont = problem.schedules.at(k)
        halvings = 0
        res_k = None
        while res_k is None:
            try:
                res_k = problem.evaluate(w, cont=cont, J0=J0, need_grad=True)
            except (NonConvergenceError, BracketError) as exc:
                if res is None or halvings >= settings.max_halvings:
                    status, message = "forward_failure", f"iteration {k}: {exc}"
                    break
                halvings += 1
                w = w_eval + 0.5 * (w - w_eval)
                log.warning("iteration %d: forward solve failed, halving the update (%d)", k, halvings)
            except SwellTopoError as exc:
                status, message = "adjoint_failure", f"iteration {k}: {exc}"
                break
        if res_k is None:
            log.error(message)
            break
        res, w_eval = res_k, w
        J0 = res.J0
        row = history_row(k, res, cont, problem)
        history.append(row)
        losses.append(res.loss)
        w = adam_step(adam, w, res.gradient)
        walls.append(time.perf_counter() - t0)
        if callback is not None:
            callback(k, row, res, w_eval)
        settled = problem.schedules.settled(k, problem.has_grayness, problem.projection)
        if settled and len(losses) > settings.window:
            dl = float(np.mean(np.abs(np.diff(losses[-settings.window - 1:]))))
            if dl <= settings.loss_tol:
                status, message = "converged", f"mean loss change {dl:.3e} at iteration {k}"
                break
    # the reported design is the last one that was actually evaluated
    problem.net.w = w_eval.copy()
    feasible = res is not None and is_feasible(res, problem)
    return OptimizationResult(history, w_eval.copy(), status, message, res, walls, feasible)
