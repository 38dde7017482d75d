"""Objectives, constraints and the log-barrier loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation


def barrier(g, tau):
    """Extended log barrier: log branch for ``g <= -1/tau^2``, linear continuation beyond."""
    g = np.asarray(g, float)
    if not tau > 0:
        raise ValueError("tau must be positive")
    lim = -1.0 / tau**2
    log_branch = -np.log(np.where(g <= lim, -g, 1.0)) / tau
    lin_branch = tau * g - np.log(1.0 / tau**2) / tau + 1.0 / tau
    out = np.where(g <= lim, log_branch, lin_branch)
    return float(out) if out.ndim == 0 else out


def barrier_derivative(g, tau):
    g = np.asarray(g, float)
    lim = -1.0 / tau**2
    out = np.where(g <= lim, -1.0 / (tau * np.where(g <= lim, g, -1.0)), tau)
    return float(out) if out.ndim == 0 else out


def total_loss(J, J0, constraints, tau):
    """``J/J0 + sum(barrier(g_i))``."""
    return J / J0 + sum(barrier(g, tau) for g in constraints)


@dataclass
class ShapeTarget:
    """Target displacements at sample points; ``S`` interpolates nodal displacements to the points."""

    points: np.ndarray
    target: np.ndarray
    S: object

    @classmethod
    def on_mesh(cls, mesh, points, target):
        points = np.atleast_2d(np.asarray(points, float))
        target = np.atleast_2d(np.asarray(target, float))
        if len(points) < 1 or target.shape != points.shape:
            raise ConfigError("shape target needs one 2-vector per sample point")
        return cls(points, target, mesh.interpolation_matrix(points))


def objective_shape_morphing(u, target: ShapeTarget):
    """Mean squared displacement error and its gradient with respect to ``u``."""
    diff = (target.S @ u).reshape(-1, 2) - target.target
    n = len(diff)
    J = float(np.sum(diff * diff) / n)
    grad = target.S.T @ (2.0 * diff.ravel() / n)
    return J, grad


@dataclass
class BlockedForceSpec:
    selector: np.ndarray

    def check(self, system):
        touched = np.flatnonzero(self.selector)
        if touched.size == 0:
            raise ConfigError("blocked-force selector is empty")
        if np.setdiff1d(touched, system.fixed).size:
            raise ContractViolation("blocked-force output dofs must be Dirichlet-fixed")


def objective_blocked_force(f_int, spec: BlockedForceSpec):
    """``l . f_int``; the gradient with respect to ``f_int`` is ``l``."""
    return float(spec.selector @ f_int), spec.selector


def constraint_volume(rho, volumes, phases, bound):
    """Volume fraction of the aggregate of ``phases`` minus its bound, and d/d rho."""
    phases = list(phases)
    if not phases:
        raise ConfigError("volume constraint needs at least one phase")
    rho = np.asarray(rho, float)
    v = np.asarray(volumes, float)
    frac = v / v.sum()
    agg = rho[:, phases].sum(axis=1)
    g = float(frac @ agg - bound)
    d = np.zeros_like(rho)
    d[:, phases] = frac[:, None]
    return g, d


def grayness(rho):
    rho = np.asarray(rho, float)
    return float(np.sum(rho * (1.0 - rho)) / rho.shape[0])


def constraint_grayness(rho, xi):
    rho = np.asarray(rho, float)
    return grayness(rho) - xi, (1.0 - 2.0 * rho) / rho.shape[0]
