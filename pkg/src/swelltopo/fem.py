"""Plane-stress bilinear quadrilateral solver with an energy-consistent F-bar.

The element energy is evaluated at the modified gradient
``Fbar = sqrt(J_centroid / J_gp) * F_gp`` and differentiated exactly, so the
residual is the gradient of a potential and the tangent is symmetric.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import material as mat
from .errors import BracketError, ConfigError, ContractViolation, NonConvergenceError

log = logging.getLogger(__name__)

_GP = 1.0 / np.sqrt(3.0)
GAUSS_XI = np.array([[-_GP, -_GP], [_GP, -_GP], [_GP, _GP], [-_GP, _GP]])
_NODE_XI = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
ROUNDOFF_FACTOR = 64.0
STALL_STEP = 2.0**-4


def shape_functions(xi):
    """Bilinear shape functions and natural derivatives at points ``xi`` (n, 2)."""
    xi = np.atleast_2d(xi)
    N = 0.25 * (1 + xi[:, None, 0] * _NODE_XI[None, :, 0]) * (1 + xi[:, None, 1] * _NODE_XI[None, :, 1])
    dN = np.empty(xi.shape[:1] + (4, 2))
    dN[..., 0] = 0.25 * _NODE_XI[None, :, 0] * (1 + xi[:, None, 1] * _NODE_XI[None, :, 1])
    dN[..., 1] = 0.25 * _NODE_XI[None, :, 1] * (1 + xi[:, None, 0] * _NODE_XI[None, :, 0])
    return N, dN


@dataclass
class QuadMesh:
    nodes: np.ndarray
    elements: np.ndarray
    thickness: float = 1.0
    node_sets: dict = field(default_factory=dict)
    edge_sets: dict = field(default_factory=dict)
    shape: tuple | None = None   # (nx, ny) for structured meshes

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        if self.elements.min() < 0 or self.elements.max() >= len(self.nodes):
            raise ConfigError("element node index out of range")
        if len({tuple(sorted(e)) for e in self.elements.tolist()}) != len(self.elements):
            raise ConfigError("duplicate elements")
        _, det = self._reference_geometry(GAUSS_XI)
        if np.any(det <= 0):
            raise ConfigError("element with non-positive reference Jacobian")

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def n_dofs(self):
        return 2 * len(self.nodes)

    def _reference_geometry(self, xi):
        Xe = self.nodes[self.elements]                       # (ne, 4, 2)
        _, dN = shape_functions(xi)                         # (ng, 4, 2)
        Jac = np.einsum("eai,gaj->egij", Xe, dN)            # dX_i/dxi_j
        det = Jac[..., 0, 0] * Jac[..., 1, 1] - Jac[..., 0, 1] * Jac[..., 1, 0]
        return Jac, det

    def gradient_operators(self, xi):
        """dN/dX at natural points ``xi`` for every element, plus Jacobian determinants."""
        Jac, det = self._reference_geometry(xi)
        inv = np.linalg.inv(Jac)
        _, dN = shape_functions(xi)
        return np.einsum("gak,egkj->egaj", dN, inv), det

    def element_areas(self):
        _, det = self._reference_geometry(GAUSS_XI)
        return det.sum(axis=1)

    def centroids(self):
        return self.nodes[self.elements].mean(axis=1)

    def gauss_points(self):
        N, _ = shape_functions(GAUSS_XI)
        return np.einsum("ga,eai->egi", N, self.nodes[self.elements])

    def bounding_box(self):
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    def element_dofs(self):
        e = self.elements
        return np.stack([2 * e[:, 0], 2 * e[:, 0] + 1, 2 * e[:, 1], 2 * e[:, 1] + 1,
                         2 * e[:, 2], 2 * e[:, 2] + 1, 2 * e[:, 3], 2 * e[:, 3] + 1], axis=1)

    def nodes_in(self, name_or_ids):
        if isinstance(name_or_ids, str):
            if name_or_ids not in self.node_sets:
                raise ConfigError(f"unknown node set {name_or_ids!r}")
            return np.asarray(self.node_sets[name_or_ids])
        return np.asarray(name_or_ids, dtype=np.int64)

    def nodes_where(self, predicate):
        return np.flatnonzero(predicate(self.nodes[:, 0], self.nodes[:, 1]))

    def add_node_set(self, name, ids):
        self.node_sets[name] = np.asarray(ids, dtype=np.int64)

    def locate(self, points, tol=1e-9):
        """Element index and natural coordinates of each point (inverse bilinear map)."""
        points = np.atleast_2d(points)
        cen = self.centroids()
        out_e = np.empty(len(points), dtype=np.int64)
        out_xi = np.empty((len(points), 2))
        for k, p in enumerate(points):
            order = np.argsort(np.sum((cen - p) ** 2, axis=1))
            for e in order[:16]:
                Xe = self.nodes[self.elements[e]]
                xi = np.zeros(2)
                for _ in range(25):
                    N, dN = shape_functions(xi)
                    r = N[0] @ Xe - p
                    Jm = Xe.T @ dN[0]
                    xi = xi - np.linalg.solve(Jm, r)
                if np.all(np.abs(xi) <= 1 + tol):
                    out_e[k], out_xi[k] = e, np.clip(xi, -1, 1)
                    break
            else:
                raise ConfigError(f"sample point {p.tolist()} lies outside the mesh")
        return out_e, out_xi

    def interpolation_matrix(self, points):
        """Sparse matrix S with ``(S @ u).reshape(-1, 2)`` the displacement at ``points``."""
        elems, xis = self.locate(points)
        rows, cols, vals = [], [], []
        for k, (e, xi) in enumerate(zip(elems, xis)):
            N, _ = shape_functions(xi)
            for a, node in enumerate(self.elements[e]):
                for c in range(2):
                    rows.append(2 * k + c)
                    cols.append(2 * node + c)
                    vals.append(N[0, a])
        return sp.csr_matrix((vals, (rows, cols)), shape=(2 * len(points), self.n_dofs))


def build_rect_mesh(nx, ny, lx, ly, thickness=1.0, origin=(0.0, 0.0)):
    """Structured rectangle meshed with ``nx * ny`` counter-clockwise quads.

    Node sets ``left/right/top/bottom`` and the four corners are registered;
    edge sets of the same side names hold boundary node pairs.
    """
    if nx < 1 or ny < 1 or not lx > 0 or not ly > 0 or not thickness > 0:
        raise ConfigError("mesh counts must be >= 1 and dimensions > 0")
    xs = origin[0] + np.linspace(0.0, lx, nx + 1)
    ys = origin[1] + np.linspace(0.0, ly, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    nid = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    elements = np.column_stack([nid[:-1, :-1].ravel(), nid[:-1, 1:].ravel(),
                                nid[1:, 1:].ravel(), nid[1:, :-1].ravel()])
    sides = {"left": nid[:, 0], "right": nid[:, -1], "bottom": nid[0, :], "top": nid[-1, :]}
    node_sets = dict(sides)
    node_sets.update(bottom_left=nid[:1, 0], bottom_right=nid[:1, -1],
                     top_left=nid[-1:, 0], top_right=nid[-1:, -1])
    edge_sets = {k: np.column_stack([v[:-1], v[1:]]) for k, v in sides.items()}
    return QuadMesh(nodes, elements, thickness, node_sets, edge_sets, shape=(nx, ny))


def fbar_deformation_gradient(F_gp, F_centroid):
    """Replace the area change of ``F_gp`` by the centroid one."""
    F_gp = np.asarray(F_gp, float)
    F_centroid = np.asarray(F_centroid, float)
    Jg = np.linalg.det(F_gp)
    Jc = np.linalg.det(F_centroid)
    if np.any(Jg <= 0) or np.any(Jc <= 0):
        from .errors import InvertedElementError
        raise InvertedElementError("non-positive Jacobian in F-bar")
    return np.sqrt(Jc / Jg)[..., None, None] * F_gp


# ------------------------------------------------------------------ boundary conditions


@dataclass
class BoundaryConditions:
    """Dirichlet entries are ``(node set, component, value)``; Neumann entries ``(edge set, traction)``.

    Traction is a dead load in Pa acting on the reference edge times the
    mesh thickness.
    """

    dirichlet: list = field(default_factory=list)
    neumann: list = field(default_factory=list)

    def resolve(self, mesh: QuadMesh):
        dof_val = {}
        for nset, comp, value in self.dirichlet:
            for n in mesh.nodes_in(nset):
                dof_val[int(2 * n + comp)] = float(value)
        fixed = np.array(sorted(dof_val), dtype=np.int64)
        values = np.array([dof_val[d] for d in fixed])
        f_ext = np.zeros(mesh.n_dofs)
        for eset, traction in self.neumann:
            if eset not in mesh.edge_sets:
                raise ConfigError(f"unknown edge set {eset!r}")
            t = np.asarray(traction, float)
            for n0, n1 in mesh.edge_sets[eset]:
                L = np.linalg.norm(mesh.nodes[n1] - mesh.nodes[n0])
                for n in (n0, n1):
                    f_ext[2 * n:2 * n + 2] += 0.5 * L * mesh.thickness * t
        loaded = np.flatnonzero(f_ext)
        if np.intersect1d(loaded, fixed).size:
            raise ConfigError("a dof carries both a Dirichlet value and a traction")
        return fixed, values, f_ext


@dataclass(frozen=True)
class LoadSchedule:
    num_steps: int = 20
    beta: float = 0.05

    def __post_init__(self):
        if self.num_steps < 1 or not 0 < self.beta:
            raise ValueError("load schedule needs num_steps >= 1 and beta > 0")

    def alphas(self):
        k = np.arange(1, self.num_steps + 1)
        return (k / self.num_steps) ** self.beta


@dataclass(frozen=True)
class NewtonSettings:
    tolerance: float = 1e-6
    max_iterations: int = 30
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 20
    abs_floor: float = 1e-10

    def __post_init__(self):
        if not (self.tolerance > 0 and self.max_iterations > 0 and self.armijo > 0
                and 0 < self.backtrack < 1 and self.max_backtracks > 0):
            raise ValueError("invalid Newton settings")


@dataclass
class DesignFields:
    """Per-element modulus, chi and fiber stiffness; per-Gauss-point fiber angle."""

    G: np.ndarray
    chi: np.ndarray
    eta: np.ndarray
    theta: np.ndarray

    @classmethod
    def uniform(cls, mesh, G, chi, eta=0.0, theta=0.0):
        ne = mesh.n_elements
        return cls(np.full(ne, float(G)), np.full(ne, float(chi)), np.full(ne, float(eta)),
                   np.full((ne, 4), float(theta)))

    @classmethod
    def from_phases(cls, mesh, table, phase_index, solvent, eta_scale=1.0, theta=0.0):
        """Crisp layout from an integer phase index per element."""
        idx = np.asarray(phase_index)
        G = table.moduli()[idx]
        chi = table.chis(solvent)[idx]
        eta = table.fiber_stiffnesses()[idx] * eta_scale
        th = np.broadcast_to(np.asarray(theta, float), (mesh.n_elements, 4)).copy() \
            if np.ndim(theta) < 2 else np.asarray(theta, float)
        return cls(G.astype(float), chi.astype(float), eta.astype(float), th)


@dataclass
class Assembly:
    ok: bool
    f_int: np.ndarray | None = None
    K: sp.csr_matrix | None = None
    energy: float = np.nan
    phi: np.ndarray | None = None      # (ne, 4)
    # cached for sensitivities
    Bbar: np.ndarray | None = None     # (ne, 4, 4, 8)
    xbar: np.ndarray | None = None     # (ne, 4, 4) F-bar at the Gauss points
    weights: np.ndarray | None = None  # (ne, 4)
    response: mat.PointResponse | None = None
    roundoff: float = 0.0              # cancellation floor of the free residual norm
    residual_norm: float = np.inf      # set by the line search for the current load level


@dataclass
class SolveState:
    u: np.ndarray
    phi_gp: np.ndarray
    converged: bool
    residual_history: list
    newton_iterations: list
    assembly: Assembly | None = None
    factor: object = None
    mu: float = np.nan
    design: DesignFields | None = None


class FESystem:
    """Mesh + boundary conditions + solver settings for one solvent environment."""

    def __init__(self, mesh: QuadMesh, bcs: BoundaryConditions, env: mat.SolventEnvironment,
                 newton: NewtonSettings | None = None, schedule: LoadSchedule | None = None):
        self.mesh = mesh
        self.bcs = bcs
        self.env = env
        self.newton = newton or NewtonSettings()
        self.schedule = schedule or LoadSchedule()
        self.fixed, self.fixed_values, self.f_ext = bcs.resolve(mesh)
        mask = np.ones(mesh.n_dofs, bool)
        mask[self.fixed] = False
        self.free = np.flatnonzero(mask)
        self.edofs = mesh.element_dofs()
        self.rows = np.repeat(self.edofs, 8, axis=1).ravel()
        self.cols = np.tile(self.edofs, (1, 8)).ravel()
        self._precompute()

    def _precompute(self):
        m = self.mesh
        dN, det = m.gradient_operators(GAUSS_XI)               # (ne, 4, 4, 2)
        dNc, _ = m.gradient_operators(np.zeros((1, 2)))
        self.weights = det * m.thickness                       # unit Gauss weights
        self.Gg = self._grad_op(dN)                            # (ne, 4, 4, 8)
        self.Gc = self._grad_op(dNc)[:, 0]                     # (ne, 4, 8)

    @staticmethod
    def _grad_op(dN):
        out = np.zeros(dN.shape[:2] + (4, 8))
        for i in range(2):
            for j in range(2):
                out[..., 2 * i + j, i::2] = dN[..., :, j]
        return out

    # ------------------------------------------------------------------ assembly

    def deformation_gradients(self, u):
        ue = u[self.edofs]
        xg = np.einsum("egkd,ed->egk", self.Gg, ue) + np.array([1.0, 0, 0, 1.0])
        xc = np.einsum("ekd,ed->ek", self.Gc, ue) + np.array([1.0, 0, 0, 1.0])
        return xg, xc

    def assemble(self, u, design: DesignFields, mu, tangent=True) -> Assembly:
        """Internal force vector and consistent tangent at displacement ``u``.

        Returns ``Assembly(ok=False)`` on an inverted element or failed swelling solve.
        """
        xg, xc = self.deformation_gradients(u)
        Jg = xg[..., 0] * xg[..., 3] - xg[..., 1] * xg[..., 2]
        Jc = xc[..., 0] * xc[..., 3] - xc[..., 1] * xc[..., 2]
        if np.any(Jg <= 0) or np.any(Jc <= 0):
            return Assembly(ok=False)
        r = np.sqrt(Jc[:, None] / Jg)                          # (ne, 4)
        gJg = mat.det_grad(xg)
        gJc = mat.det_grad(xc)
        lx = -0.5 * gJg / Jg[..., None]
        ly = np.broadcast_to((0.5 * gJc / Jc[..., None])[:, None, :], lx.shape)
        xbar = r[..., None] * xg
        I4 = np.eye(4)
        Dx = r[..., None, None] * (I4 + xg[..., :, None] * lx[..., None, :])
        Dy = r[..., None, None] * (xg[..., :, None] * ly[..., None, :])
        Bbar = Dx @ self.Gg + Dy @ self.Gc[:, None]

        ne = self.mesh.n_elements
        G = np.repeat(design.G[:, None], 4, 1)
        chi = np.repeat(design.chi[:, None], 4, 1)
        eta = np.repeat(design.eta[:, None], 4, 1)
        resp = mat.point_response(xbar, G, chi, eta, design.theta, mu, self.env, tangent=tangent)
        if not resp.ok.all():
            return Assembly(ok=False)
        w = self.weights
        fe = np.einsum("eg,egkd,egk->ed", w, Bbar, resp.P)
        f_int = np.zeros(self.mesh.n_dofs)
        np.add.at(f_int, self.edofs.ravel(), fe.ravel())
        # the stress is a difference of elastic and swelling parts that nearly
        # cancel; their magnitudes set the attainable residual floor
        Gx = G[..., None] * xbar
        P_abs = np.abs(Gx) + np.abs(resp.P - Gx)
        fe_abs = np.einsum("eg,egkd,egk->ed", w, np.abs(Bbar), P_abs)
        f_abs = np.zeros(self.mesh.n_dofs)
        np.add.at(f_abs, self.edofs.ravel(), fe_abs.ravel())
        energy = float(np.sum(w * resp.psi))
        K = None
        if tangent:
            Ke = np.einsum("eg,egkd,egkl,egln->edn", w, Bbar, resp.A, Bbar, optimize=True)
            # second variation of Fbar contracted with the stress
            M = np.concatenate([self.Gg, np.broadcast_to(self.Gc[:, None], self.Gg.shape)], axis=2)
            gl = np.concatenate([lx, ly], axis=-1)
            hl = np.zeros((ne, 4, 8, 8))
            hl[..., :4, :4] = -0.5 * _hess_logdet(xg, Jg)
            hl[..., 4:, 4:] = 0.5 * _hess_logdet(xc, Jc)[:, None]
            Pz = np.concatenate([resp.P, np.zeros_like(resp.P)], axis=-1)
            sP = np.sum(resp.P * xg, axis=-1)
            Hs = r[..., None, None] * (sP[..., None, None] * (gl[..., :, None] * gl[..., None, :] + hl)
                                       + gl[..., :, None] * Pz[..., None, :] + Pz[..., :, None] * gl[..., None, :])
            Ke += np.einsum("eg,egkd,egkl,egln->edn", w, M, Hs, M, optimize=True)
            K = sp.coo_matrix((Ke.ravel(), (self.rows, self.cols)),
                              shape=(self.mesh.n_dofs,) * 2).tocsr()
        roundoff = ROUNDOFF_FACTOR * np.finfo(float).eps * float(np.linalg.norm(f_abs[self.free]))
        return Assembly(ok=True, f_int=f_int, K=K, energy=energy, phi=resp.phi, roundoff=roundoff,
                        Bbar=Bbar, xbar=xbar, weights=w, response=resp)

    # ------------------------------------------------------------------ solvers

    def _free_norm(self, R):
        return float(np.linalg.norm(R[self.free]))

    def newton_solve(self, u0, design: DesignFields, mu, alpha=1.0, tol=None):
        """Damped Newton-Raphson at a fixed load level; Dirichlet dofs are eliminated.

        Returns ``(u, assembly, iterations, history)``; the assembly (with tangent)
        is evaluated at the returned state.
        """
        s = self.newton
        u = np.array(u0, dtype=float)
        u[self.fixed] = alpha * self.fixed_values
        f_ext = alpha * self.f_ext
        asm = self.assemble(u, design, mu)
        if not asm.ok:
            raise NonConvergenceError("initial state is not admissible", u=u, history=[])
        R = asm.f_int - f_ext
        norm = self._free_norm(R)
        if tol is None:
            tol = max(s.tolerance * max(norm, np.linalg.norm(f_ext)), s.abs_floor)
        history = [norm]
        it = 0
        energy_mode = False
        # a tolerance below the assembly round-off cannot be met; clamp to it
        while norm > max(tol, asm.roundoff):
            if it >= s.max_iterations:
                raise NonConvergenceError(
                    f"Newton did not converge in {s.max_iterations} iterations (|R|={norm:.3e}, tol={tol:.3e})",
                    u=u, history=history)
            Kff = asm.K[self.free][:, self.free].tocsc()
            found = None
            if not energy_mode:
                found = self._residual_search(u, asm, R, norm, Kff, design, mu, f_ext, tol)
                # the residual merit stalls near singular tangents (buckling), either
                # failing outright or crawling with heavily damped steps; the
                # potential still has a useful descent direction there
                if found is None or found[2] < STALL_STEP:
                    energy_mode = True
                    log.debug("Newton switched to the energy merit at |R|=%.3e", norm)
                if found is not None:
                    found = found[:2]
            if energy_mode:
                found = self._energy_search(u, asm, R, norm, Kff, design, mu, f_ext, tol)
                if found is not None:
                    # an undamped, unshifted step means the quadratic regime is back
                    energy_mode = not found[2]
                    found = found[:2]
            if found is None:
                raise NonConvergenceError("line search exhausted its backtracks", u=u, history=history)
            ut, trial = found
            Rt = trial.f_int - f_ext
            nt = self._free_norm(Rt)
            u, asm, R, norm = ut, trial, Rt, nt
            history.append(norm)
            it += 1
        return u, asm, it, history

    def _accept_residual(self, trial, merit0, step, tol):
        s = self.newton
        return trial.ok and (0.5 * trial.residual_norm ** 2 <= (1.0 - 2.0 * s.armijo * step) * merit0
                             or trial.residual_norm <= max(tol, trial.roundoff))

    def _try(self, u, d, step, design, mu, f_ext):
        ut = u.copy()
        ut[self.free] += step * d
        trial = self.assemble(ut, design, mu)
        trial.residual_norm = self._free_norm(trial.f_int - f_ext) if trial.ok else np.inf
        return ut, trial

    def _residual_search(self, u, asm, R, norm, Kff, design, mu, f_ext, tol):
        """Armijo backtracking on 0.5 |R|^2 along the Newton direction."""
        s = self.newton
        try:
            d = -splu(Kff).solve(R[self.free])
        except RuntimeError:
            return None
        step = 1.0
        for _ in range(s.max_backtracks + 1):
            ut, trial = self._try(u, d, step, design, mu, f_ext)
            if self._accept_residual(trial, 0.5 * norm * norm, step, tol):
                return ut, trial, step
            step *= s.backtrack
        return None

    def _energy_search(self, u, asm, R, norm, Kff, design, mu, f_ext, tol):
        """Armijo backtracking on the total potential.

        The internal forces derive from the stored energy, so the potential
        is a valid merit.  The Newton direction is used when it descends;
        otherwise the tangent is shifted until it does.  A step that meets
        the residual test is accepted too, since near convergence the
        potential differences drown in round-off.
        """
        s = self.newton
        Rf = R[self.free]
        pot0 = asm.energy - f_ext @ u
        eye = sp.identity(Kff.shape[0], format="csc")
        dscale = float(np.mean(np.abs(Kff.diagonal())))
        for shift in (0.0, *(dscale * 10.0 ** np.arange(-6, 3))):
            try:
                d = -splu((Kff + shift * eye).tocsc() if shift else Kff).solve(Rf)
            except RuntimeError:
                continue
            slope = float(Rf @ d)
            if not slope < 0:
                continue
            step = 1.0
            for _ in range(s.max_backtracks + 1):
                ut, trial = self._try(u, d, step, design, mu, f_ext)
                if trial.ok and (trial.energy - f_ext @ ut <= pot0 + s.armijo * step * slope
                                 or self._accept_residual(trial, 0.5 * norm * norm, step, tol)):
                    return ut, trial, shift == 0.0 and step == 1.0
                step *= s.backtrack
        return None

    def load_stepping_solve(self, design: DesignFields, schedule: LoadSchedule | None = None, tol_rel=None):
        """Incremental solve stepping the bath potential from dry to wet.

        Tractions and inhomogeneous Dirichlet values are scaled by the same
        load factor; each step is warm-started from the previous one.
        """
        schedule = schedule or self.schedule
        env = self.env
        u = np.zeros(self.mesh.n_dofs)
        hist, iters = [], []
        tol = None
        asm = None
        mu = env.mu_wet
        for k, alpha in enumerate(schedule.alphas(), start=1):
            mu = (1.0 - alpha) * env.mu_dry + alpha * env.mu_wet
            if tol is None:
                # step-1 force scale fixes the absolute tolerance for the whole run
                uu = u.copy()
                uu[self.fixed] = alpha * self.fixed_values
                a0 = self.assemble(uu, design, mu, tangent=False)
                if not a0.ok:
                    raise NonConvergenceError("first load step starts from an inadmissible state", step=k)
                scale = max(self._free_norm(a0.f_int - alpha * self.f_ext), np.linalg.norm(self.f_ext))
                rel = self.newton.tolerance if tol_rel is None else tol_rel
                tol = max(rel * scale, self.newton.abs_floor)
            try:
                u, asm, it, h = self.newton_solve(u, design, mu, alpha, tol=tol)
            except NonConvergenceError as exc:
                exc.step = k
                raise
            hist.append(h)
            iters.append(it)
        return SolveState(u=u, phi_gp=asm.phi, converged=True, residual_history=hist,
                          newton_iterations=iters, assembly=asm, mu=mu, design=design)

    def robust_solve(self, design: DesignFields, retries=2):
        """Load-stepping solve; on failure retry with twice the load steps, up to ``retries`` times."""
        sched = self.schedule
        for attempt in range(retries + 1):
            try:
                return self.load_stepping_solve(design, schedule=sched)
            except (NonConvergenceError, BracketError) as exc:
                if attempt == retries:
                    raise
                sched = LoadSchedule(2 * sched.num_steps, sched.beta)
                log.warning("forward solve failed (%s); retrying with %d load steps", exc, sched.num_steps)

    def factorize(self, state: SolveState):
        """Sparse LU of the free-free tangent at the converged state (kept on the state)."""
        if state.factor is None:
            state.factor = splu(state.assembly.K[self.free][:, self.free].tocsc())
        return state.factor

    def reaction_force(self, state: SolveState, selector):
        """``l . f_int(u*)``; the selector must only touch Dirichlet dofs."""
        l = np.asarray(selector, float)
        touched = np.flatnonzero(l)
        if np.setdiff1d(touched, self.fixed).size:
            raise ContractViolation("reaction selector touches a free dof")
        return float(l @ state.assembly.f_int)


def _hess_logdet(x, J):
    g = mat.det_grad(x)
    return mat._HJ / J[..., None, None] - g[..., :, None] * g[..., None, :] / (J * J)[..., None, None]
