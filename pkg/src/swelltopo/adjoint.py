"""Implicit-function sensitivities of the converged equilibrium.

Two nested roots are differentiated at their converged values: the scalar
swelling root at each Gauss point (closed form, see
:func:`swelltopo.material.phi_sensitivity`) and the discrete equilibrium,
through one adjoint solve with the tangent at the converged state.  The
load-stepping history is never differentiated: the static hyperelastic
equilibrium does not depend on the path that reached it.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import material as mat
from .errors import AdjointError, SingularEquilibriumError
from .fem import FESystem, SolveState

ADJOINT_RTOL = 1e-10


@dataclass
class AdjointWorkspace:
    system: FESystem
    state: SolveState

    @property
    def u(self):
        return self.state.u

    def factor(self):
        return self.system.factorize(self.state)


def phi_sensitivity(ws: AdjointWorkspace):
    """d phi / d(J2D, G, chi) at every Gauss point, shape ``(ne, 4, 3)``."""
    asm = ws.state.assembly
    r = asm.response
    x = asm.xbar
    J2D = x[..., 0] * x[..., 3] - x[..., 1] * x[..., 2]
    G = np.repeat(ws.state.design.G[:, None], 4, 1)
    chi = np.repeat(ws.state.design.chi[:, None], 4, 1)
    try:
        dphi, _ = mat.phi_sensitivity(r.phi, r.s, J2D, G, chi, ws.system.env)
    except SingularEquilibriumError as exc:
        e, g = divmod(exc.index, 4)
        raise SingularEquilibriumError(f"singular swelling equilibrium at element {e}, Gauss point {g}",
                                       index=exc.index) from None
    return dphi


def adjoint_solve(ws: AdjointWorkspace, rhs):
    """Solve ``K^T lam = rhs`` on the free dofs; ``lam`` is zero on Dirichlet dofs.

    ``K`` is symmetric here, so the stored LU of ``K`` serves the transpose.
    The relative residual of every solve is checked against ``ADJOINT_RTOL``.
    """
    sysm = ws.system
    rhs = np.asarray(rhs, float)
    lam = np.zeros(sysm.mesh.n_dofs)
    b = rhs[sysm.free]
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return lam
    try:
        lu = ws.factor()
        x = lu.solve(b, trans="T")
    except (RuntimeError, ValueError) as exc:
        raise AdjointError(f"adjoint factorization failed: {exc}") from exc
    Kff = ws.state.assembly.K[sysm.free][:, sysm.free]
    res = np.linalg.norm(Kff.T @ x - b) / nb
    if not np.isfinite(res) or res > ADJOINT_RTOL:
        # one step of iterative refinement before giving up
        x = x + lu.solve(b - Kff.T @ x, trans="T")
        res = np.linalg.norm(Kff.T @ x - b) / nb
        if not np.isfinite(res) or res > ADJOINT_RTOL:
            raise AdjointError(f"adjoint residual {res:.3e} exceeds {ADJOINT_RTOL:g}")
    lam[sysm.free] = x
    ws.last_residual = res
    return lam


def property_gradients(ws: AdjointWorkspace, v):
    """Contract ``v . d f_int / d(props)`` at the converged state.

    Returns per-element gradients for modulus, chi and fiber stiffness and
    per-Gauss-point gradients for the fiber angle.  The swelling-root
    dependence is already folded into the stress partials.
    """
    asm = ws.state.assembly
    r = asm.response
    ve = np.asarray(v, float)[ws.system.edofs]
    dF = np.einsum("egkd,ed->egk", asm.Bbar, ve) * asm.weights[..., None]
    dG = np.einsum("egk,egk->e", dF, r.dP_dG)
    dchi = np.einsum("egk,egk->e", dF, r.dP_dchi)
    deta = np.einsum("egk,egk->e", dF, r.dP_deta)
    dtheta = np.einsum("egk,egk->eg", dF, r.dP_dtheta)
    return dG, dchi, deta, dtheta


def case_sensitivity(ws: AdjointWorkspace, c_u, c_f):
    """Gradient of a loss ``L(u*, f_int(u*))`` with respect to the material fields of one case.

    ``c_u`` is dL/du and ``c_f`` is dL/df_int, both full-length vectors.
    """
    K = ws.state.assembly.K
    rhs = np.asarray(c_u, float) + K.T @ np.asarray(c_f, float)
    lam = adjoint_solve(ws, rhs)
    return property_gradients(ws, np.asarray(c_f, float) - lam), lam


def fd_check(problem, seed=0, hs=(1e-4, 1e-5, 1e-6, 1e-7, 1e-8), n_components=20, cont=None, J0=None,
             csv_path=None):
    """Adjoint gradient against central differences of the full load-stepped pipeline.

    ``hs`` are relative to ``max(|w_i|, 1e-2)``.  Returns a list of rows
    ``(h, index, adjoint, fd, rel_error)``; the best row per component is
    flagged by the caller through :func:`best_errors`.
    """
    rng = np.random.default_rng(seed)
    w0 = problem.net.w.copy()
    res = problem.evaluate(w0, cont=cont, J0=J0, need_grad=True)
    J0 = res.J0
    g = res.gradient
    # weights feeding dead ReLU units have an exactly zero gradient; sample the live ones
    live = np.flatnonzero(g != 0.0)
    pool = live if live.size >= n_components else np.arange(w0.size)
    idx = np.sort(rng.choice(pool, size=min(n_components, pool.size), replace=False))
    rows = []
    for i in idx:
        scale = max(abs(w0[i]), 1e-2)
        for h in hs:
            step = h * scale
            wp, wm = w0.copy(), w0.copy()
            wp[i] += step
            wm[i] -= step
            lp = problem.evaluate(wp, cont=cont, J0=J0, need_grad=False).loss
            lm = problem.evaluate(wm, cont=cont, J0=J0, need_grad=False).loss
            fd = (lp - lm) / (2 * step)
            denom = max(abs(g[i]), abs(fd))
            err = 0.0 if denom == 0.0 else abs(g[i] - fd) / denom
            rows.append((h, int(i), float(g[i]), float(fd), float(err)))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["h", "component", "adjoint", "fd", "rel_error"])
            wr.writerows(rows)
    return rows


def best_errors(rows):
    """Minimum relative error over the step sweep, per component."""
    best = {}
    for h, i, a, f, e in rows:
        best[i] = min(best.get(i, np.inf), e)
    return best
