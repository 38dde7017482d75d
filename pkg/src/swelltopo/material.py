"""Unified gel/elastomer/void constitutive model.

Every phase is treated as a neo-Hookean network that swells according to the
Flory-Rehner equilibrium; elastomer and void differ from the gel only through
a large Flory-Huggins parameter.  All functions are vectorized over leading
axes and are pure.

Vector convention for 2x2 tensors: ``x = [F11, F12, F21, F22]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BracketError, DomainError, InvalidDesignError, SingularEquilibriumError

R_GAS = 8.314

PHI_LO = 1e-6
PHI_HI = 1.0 - 1e-9
S_TAIL_LO = 1e-150
PHI_XTOL = 1e-12
FR_FTOL = 1e-10
MAX_BISECT = 200
SINGULAR_FLOOR = 1e-12


@dataclass(frozen=True)
class PhaseProperties:
    name: str
    shear_modulus: float
    chi: dict
    fiber_stiffness: float = 0.0

    def __post_init__(self):
        if not self.shear_modulus > 0:
            raise ValueError(f"phase {self.name}: shear modulus must be > 0")
        if any(not c > 0 for c in self.chi.values()):
            raise ValueError(f"phase {self.name}: every chi must be > 0")
        if self.fiber_stiffness < 0:
            raise ValueError(f"phase {self.name}: fiber stiffness must be >= 0")


@dataclass(frozen=True)
class MaterialTable:
    phases: tuple

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))

    @property
    def n_phases(self):
        return len(self.phases)

    @property
    def names(self):
        return [p.name for p in self.phases]

    def index(self, name):
        return self.names.index(name)

    def moduli(self):
        return np.array([p.shear_modulus for p in self.phases])

    def chis(self, solvent):
        try:
            return np.array([p.chi[solvent] for p in self.phases])
        except KeyError:
            raise KeyError(f"solvent {solvent!r} missing from the chi table") from None

    def fiber_stiffnesses(self):
        return np.array([p.fiber_stiffness for p in self.phases])


@dataclass(frozen=True)
class SolventEnvironment:
    mu_dry: float
    mu_wet: float
    mu0: float = 0.0
    molar_volume: float = 1.8e-5
    temperature: float = 298.0

    def __post_init__(self):
        if not self.mu_dry < self.mu_wet <= self.mu0:
            raise ValueError("require mu_dry < mu_wet <= mu0")
        if not self.temperature > 0 or not self.molar_volume > 0:
            raise ValueError("temperature and molar volume must be positive")

    @property
    def gas_constant(self):
        return R_GAS

    @property
    def RT(self):
        return R_GAS * self.temperature

    @property
    def kappa(self):
        """Molar volume over RT; multiplies G in the elastic term."""
        return self.molar_volume / self.RT


@dataclass(frozen=True)
class InterpolationParams:
    p: float = 3.0
    q: float = 1.0

    def __post_init__(self):
        if self.p < 1 or self.q < 1:
            raise ValueError("penalization exponents must be >= 1")


@dataclass
class EffectivePointProperties:
    G: np.ndarray
    chi: np.ndarray
    eta: np.ndarray
    theta: np.ndarray = field(default_factory=lambda: np.zeros(()))


def interpolate(rho, table: MaterialTable, params: InterpolationParams, solvent, theta=0.0):
    """SIMP interpolation of modulus, chi and fiber stiffness from phase pseudodensities.

    ``rho`` has the phase axis last.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.shape[-1] != table.n_phases:
        raise InvalidDesignError(f"expected {table.n_phases} phases, got {rho.shape[-1]}")
    if np.any(rho < 0) or np.any(rho > 1 + 1e-12):
        raise InvalidDesignError("pseudodensities must lie in [0, 1]")
    if np.any(np.abs(rho.sum(axis=-1) - 1.0) > 1e-9):
        raise InvalidDesignError("pseudodensities must sum to one")
    rp = rho ** params.p
    return EffectivePointProperties(
        G=rp @ table.moduli(),
        chi=(rho ** params.q) @ table.chis(solvent),
        eta=rp @ table.fiber_stiffnesses(),
        theta=np.broadcast_to(np.asarray(theta, dtype=float), rho.shape[:-1]).copy(),
    )


def interpolate_partials(rho, table, params, solvent):
    """d(G, chi, eta)/d rho, each with the phase axis last."""
    rho = np.asarray(rho, dtype=float)
    p, q = params.p, params.q
    drp = p * rho ** (p - 1)
    dG = drp * table.moduli()
    dchi = q * rho ** (q - 1) * table.chis(solvent)
    deta = drp * table.fiber_stiffnesses()
    return dG, dchi, deta


# ---------------------------------------------------------------- Flory-Rehner


def _residual(phi, s, a, G, chi, mu, env):
    # s = 1 - phi is passed separately so that the dry tail keeps its precision
    return ((env.mu0 - mu) / env.RT + np.log(s) + phi + chi * phi**2
            + env.kappa * G * (1.0 / (phi * a * a) - phi))


def _dres_dphi(phi, s, a, G, chi, env):
    return -1.0 / s + 1.0 + 2.0 * chi * phi + env.kappa * G * (-1.0 / (phi * phi * a * a) - 1.0)


def flory_rehner_residual(phi, J2D, G_eff, chi_eff, mu, env: SolventEnvironment):
    """Swelling equilibrium residual; zero at the equilibrium polymer fraction."""
    phi = np.asarray(phi, dtype=float)
    if np.any(phi <= 0) or np.any(phi >= 1):
        raise DomainError("phi must lie strictly inside (0, 1)")
    if np.any(np.asarray(J2D) <= 0):
        raise DomainError("area stretch must be positive")
    return _residual(phi, 1.0 - phi, np.asarray(J2D, float), G_eff, chi_eff, mu, env)


def solve_phi_full(J2D, G_eff, chi_eff, mu, env: SolventEnvironment, raise_on_failure=True):
    """Bracketed bisection for the polymer fraction, followed by a Newton polish.

    Returns ``(phi, s, ok)`` with ``s = 1 - phi`` carried at full relative
    precision.  Roots that sit closer to 1 than the upper bracket end (very dry
    baths) are located by continuing the bisection in ``log(1 - phi)``.
    """
    a, G, chi, mu = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (J2D, G_eff, chi_eff, mu)))
    shape = a.shape
    a, G, chi, mu = (v.ravel() for v in (a, G, chi, mu))
    n = a.size
    ok = (a > 0) & np.isfinite(a)
    a_safe = np.where(ok, a, 1.0)

    f_lo = _residual(PHI_LO, 1.0 - PHI_LO, a_safe, G, chi, mu, env)
    f_hi = _residual(PHI_HI, 1.0 - PHI_HI, a_safe, G, chi, mu, env)
    ok &= f_lo > 0
    tail = ok & (f_hi > 0)

    phi = np.empty(n)
    s = np.empty(n)

    # main bracket, bisection in phi
    main = ok & ~tail
    if np.any(main):
        idx = np.flatnonzero(main)
        lo = np.full(idx.size, PHI_LO)
        hi = np.full(idx.size, PHI_HI)
        aa, GG, cc, mm = a_safe[idx], G[idx], chi[idx], mu[idx]
        active = np.ones(idx.size, bool)
        root = np.empty(idx.size)
        for _ in range(MAX_BISECT):
            mid = 0.5 * (lo + hi)
            fm = _residual(mid, 1.0 - mid, aa, GG, cc, mm, env)
            pos = fm > 0
            lo = np.where(active & pos, mid, lo)
            hi = np.where(active & ~pos, mid, hi)
            hit = active & (np.abs(fm) < FR_FTOL)
            narrow = active & ~hit & (hi - lo < PHI_XTOL)
            root[hit] = mid[hit]
            root[narrow] = 0.5 * (lo + hi)[narrow]
            active &= ~(hit | narrow)
            if not active.any():
                break
        root[active] = 0.5 * (lo + hi)[active]
        x = root
        f = _residual(x, 1.0 - x, aa, GG, cc, mm, env)
        for _ in range(3):
            d = _dres_dphi(x, 1.0 - x, aa, GG, cc, env)
            xn = np.clip(x - f / d, PHI_LO, PHI_HI)
            fn = _residual(xn, 1.0 - xn, aa, GG, cc, mm, env)
            better = np.abs(fn) < np.abs(f)
            x = np.where(better, xn, x)
            f = np.where(better, fn, f)
        phi[idx] = x
        s[idx] = 1.0 - x

    # dry tail, bisection in t = log(1 - phi)
    if np.any(tail):
        idx = np.flatnonzero(tail)
        aa, GG, cc, mm = a_safe[idx], G[idx], chi[idx], mu[idx]
        t_lo = np.full(idx.size, np.log(S_TAIL_LO))
        t_hi = np.full(idx.size, np.log(1.0 - PHI_HI))

        def res_t(t):
            ss = np.exp(t)
            return _residual(1.0 - ss, ss, aa, GG, cc, mm, env)

        good = res_t(t_lo) < 0
        ok[idx[~good]] = False
        for _ in range(MAX_BISECT):
            tm = 0.5 * (t_lo + t_hi)
            fm = res_t(tm)
            # residual decreases with t here (s grows toward the bracket end)
            pos = fm > 0
            t_lo = np.where(pos, t_lo, tm)
            t_hi = np.where(pos, tm, t_hi)
            if np.all(t_hi - t_lo < 1e-13):
                break
        # polish as a fixed point of log(s) = A + d(s): the O(1) part A is summed once, apart from
        # the O(s) remainder, so s keeps its relative precision and stays monotone in the inputs
        A = -((env.mu0 - mm) / env.RT + 1.0 + cc + env.kappa * GG * (1.0 / (aa * aa) - 1.0))
        ss = np.exp(0.5 * (t_lo + t_hi))
        for _ in range(4):
            d = ss * (1.0 + 2.0 * cc) - cc * ss * ss - env.kappa * GG * ss * (1.0 + 1.0 / (aa * aa * (1.0 - ss)))
            ss = np.exp(A + d)
        s[idx] = ss
        phi[idx] = 1.0 - ss

    phi[~ok] = np.nan
    s[~ok] = np.nan
    if raise_on_failure and not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise BracketError(
            f"no sign change of the swelling residual over the bracket at point {bad} "
            f"(J2D={a[bad]:.4g}, G={G[bad]:.4g}, chi={chi[bad]:.4g}, mu={mu[bad]:.4g})")
    return phi.reshape(shape), s.reshape(shape), ok.reshape(shape)


def solve_phi(J2D, G_eff, chi_eff, mu, env: SolventEnvironment):
    """Equilibrium polymer volume fraction for the given area stretch and properties."""
    if np.any(np.asarray(G_eff) <= 0):
        raise DomainError("effective shear modulus must be positive")
    phi, _, _ = solve_phi_full(J2D, G_eff, chi_eff, mu, env)
    return phi if np.ndim(phi) else float(phi)


def residual_partials(phi, s, a, G, chi, env):
    """First and second partials of the swelling residual.

    Returns ``(F_phi, F_z, F_phiz, F_phiphi, F_zz)`` with ``z = (a, G, chi)``
    stacked on the last axis.
    """
    k = env.kappa
    pa2 = phi * a * a
    F_phi = _dres_dphi(phi, s, a, G, chi, env)
    F_z = np.stack([-2 * k * G / (phi * a**3), k * (1.0 / pa2 - phi), phi**2], axis=-1)
    F_phiz = np.stack([2 * k * G / (phi * phi * a**3), k * (-1.0 / (phi * pa2) - 1.0), 2 * phi], axis=-1)
    F_phiphi = -1.0 / (s * s) + 2 * chi + 2 * k * G / (phi**2 * pa2)
    zero = np.zeros_like(phi)
    F_zz = np.stack([
        np.stack([6 * k * G / (phi * a**4), -2 * k / (phi * a**3), zero], -1),
        np.stack([-2 * k / (phi * a**3), zero, zero], -1),
        np.stack([zero, zero, zero], -1),
    ], -2)
    return F_phi, F_z, F_phiz, F_phiphi, F_zz


def phi_sensitivity(phi, s, J2D, G, chi, env, floor=SINGULAR_FLOOR):
    """First and second derivatives of phi w.r.t. (J2D, G, chi) by the implicit function theorem.

    Returns ``(dphi, d2phi)`` with shapes ``(..., 3)`` and ``(..., 3, 3)``.
    """
    F_phi, F_z, F_phiz, F_phiphi, F_zz = residual_partials(phi, s, J2D, G, chi, env)
    small = np.abs(F_phi) < floor
    if np.any(small):
        bad = int(np.flatnonzero(np.ravel(small))[0])
        raise SingularEquilibriumError(f"swelling equilibrium is singular at point {bad}", index=bad)
    dphi = -F_z / F_phi[..., None]
    outer = dphi[..., :, None] * dphi[..., None, :]
    cross = F_phiz[..., :, None] * dphi[..., None, :]
    d2phi = -(F_zz + cross + np.swapaxes(cross, -1, -2) + F_phiphi[..., None, None] * outer) / F_phi[..., None, None]
    return dphi, d2phi


# ------------------------------------------------------------- strain energy

_HJ = np.zeros((4, 4))
_HJ[0, 3] = _HJ[3, 0] = 1.0
_HJ[1, 2] = _HJ[2, 1] = -1.0


def _vec(F):
    return F.reshape(F.shape[:-2] + (4,))


def det_grad(x):
    """Gradient of det F in vector form."""
    return np.stack([x[..., 3], -x[..., 2], -x[..., 1], x[..., 0]], axis=-1)


def _volumetric(phi, a, G):
    """h(a, G, phi): the part of the gel energy that depends on area stretch and phi."""
    return 0.5 * G * (1.0 / (phi * phi * a * a) + 2.0 * np.log(phi))


def _volumetric_partials(phi, a, G):
    """Gradient and Hessian of h with respect to (a, G, chi, phi)."""
    p2a2 = phi * phi * a * a
    zero = np.zeros_like(phi)
    h_z = np.stack([-G / (p2a2 * a), 0.5 * (1.0 / p2a2 + 2 * np.log(phi)), zero], -1)
    h_phi = G * (1.0 / phi - 1.0 / (phi * p2a2))
    h_zz = np.stack([
        np.stack([3 * G / (p2a2 * a * a), -1.0 / (p2a2 * a), zero], -1),
        np.stack([-1.0 / (p2a2 * a), zero, zero], -1),
        np.stack([zero, zero, zero], -1),
    ], -2)
    h_zphi = np.stack([2 * G / (phi * p2a2 * a), 1.0 / phi - 1.0 / (phi * p2a2), zero], -1)
    h_phiphi = G * (-1.0 / phi**2 + 3.0 / (phi * phi * p2a2))
    return h_z, h_phi, h_zz, h_zphi, h_phiphi


def _fiber(x, theta):
    c, sn = np.cos(theta), np.sin(theta)
    m0 = x[..., 0] * c + x[..., 1] * sn
    m1 = x[..., 2] * c + x[..., 3] * sn
    I4 = m0 * m0 + m1 * m1
    return c, sn, m0, m1, I4


def strain_energy(F2D, phi, props: EffectivePointProperties):
    """Energy density of the neo-Hookean network plus the tension-only fiber term."""
    F2D = np.asarray(F2D, dtype=float)
    a = np.linalg.det(F2D)
    if np.any(a <= 0):
        from .errors import InvertedElementError
        raise InvertedElementError("non-positive in-plane Jacobian")
    x = _vec(F2D)
    trC = np.sum(x * x, axis=-1)
    I1 = trC + 1.0 / (phi * phi * a * a)
    psi = 0.5 * props.G * (I1 - 3.0 + 2.0 * np.log(phi))
    *_, I4 = _fiber(x, props.theta)
    return psi + 0.5 * props.eta * np.maximum(I4 - 1.0, 0.0) ** 2


@dataclass
class PointResponse:
    """Constitutive response at a batch of points, with the design partials."""

    ok: np.ndarray
    phi: np.ndarray
    s: np.ndarray
    psi: np.ndarray
    P: np.ndarray          # (..., 4)
    A: np.ndarray          # (..., 4, 4)
    dP_dG: np.ndarray      # (..., 4)
    dP_dchi: np.ndarray
    dP_deta: np.ndarray
    dP_dtheta: np.ndarray
    dF_dphi: np.ndarray


def point_response(x, G, chi, eta, theta, mu, env, tangent=True, floor=SINGULAR_FLOOR):
    """Energy, stress, tangent and design partials for flattened deformation gradients ``x``.

    Points with non-positive Jacobian or a failed swelling solve are flagged in
    ``ok`` instead of raising, so that a line search can back off.
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    G, chi, eta, theta, mu = (np.broadcast_to(np.asarray(v, float), shape) for v in (G, chi, eta, theta, mu))
    a = x[..., 0] * x[..., 3] - x[..., 1] * x[..., 2]
    ok = a > 0
    a_safe = np.where(ok, a, 1.0)
    phi, s, ok_phi = solve_phi_full(a_safe, G, chi, mu, env, raise_on_failure=False)
    ok = ok & ok_phi
    phi = np.where(ok, phi, 0.5)
    s = np.where(ok, s, 0.5)

    dphi, d2phi = phi_sensitivity(phi, s, a_safe, G, chi, env, floor=floor)
    h_z, h_phi, h_zz, h_zphi, h_phiphi = _volumetric_partials(phi, a_safe, G)
    # total derivatives of H(a, G, chi) = h(a, G, phi(a, G, chi))
    H_z = h_z + h_phi[..., None] * dphi
    cr = h_zphi[..., :, None] * dphi[..., None, :]
    H_zz = (h_zz + cr + np.swapaxes(cr, -1, -2)
            + h_phiphi[..., None, None] * dphi[..., :, None] * dphi[..., None, :]
            + h_phi[..., None, None] * d2phi)

    gJ = det_grad(x)
    c, sn, m0, m1, I4 = _fiber(x, theta)
    e4 = np.maximum(I4 - 1.0, 0.0)
    gate = (I4 > 1.0).astype(float)
    gI4 = 2.0 * np.stack([m0 * c, m0 * sn, m1 * c, m1 * sn], -1)

    psi = 0.5 * G * (np.sum(x * x, -1) - 3.0) + _volumetric(phi, a_safe, G) + 0.5 * eta * e4 * e4
    P = G[..., None] * x + H_z[..., 0:1] * gJ + (eta * e4)[..., None] * gI4

    A = dP_dG = dP_dchi = dP_deta = dP_dtheta = None
    if tangent:
        cc2 = np.stack([np.stack([c * c, c * sn], -1), np.stack([c * sn, sn * sn], -1)], -2)
        hI4 = np.zeros(shape + (4, 4))
        hI4[..., 0:2, 0:2] = 2 * cc2
        hI4[..., 2:4, 2:4] = 2 * cc2
        A = (G[..., None, None] * np.eye(4)
             + H_zz[..., 0, 0][..., None, None] * gJ[..., :, None] * gJ[..., None, :]
             + H_z[..., 0][..., None, None] * _HJ
             + (eta * gate)[..., None, None] * gI4[..., :, None] * gI4[..., None, :]
             + (eta * e4)[..., None, None] * hI4)
        dP_dG = x + H_zz[..., 0, 1][..., None] * gJ
        dP_dchi = H_zz[..., 0, 2][..., None] * gJ
        dP_deta = e4[..., None] * gI4
        # d/dtheta of the fiber direction a0 = (cos, sin) -> (-sin, cos)
        mp0 = -x[..., 0] * sn + x[..., 1] * c
        mp1 = -x[..., 2] * sn + x[..., 3] * c
        dI4 = 2 * (m0 * mp0 + m1 * mp1)
        dgI4 = 2.0 * np.stack([mp0 * c - m0 * sn, mp0 * sn + m0 * c, mp1 * c - m1 * sn, mp1 * sn + m1 * c], -1)
        dP_dtheta = eta[..., None] * (gate[..., None] * dI4[..., None] * gI4 + e4[..., None] * dgI4)

    F_phi = _dres_dphi(phi, s, a_safe, G, chi, env)
    return PointResponse(ok=ok, phi=phi, s=s, psi=psi, P=P, A=A, dP_dG=dP_dG, dP_dchi=dP_dchi,
                         dP_deta=dP_deta, dP_dtheta=dP_dtheta, dF_dphi=F_phi)


def pk1_stress_and_tangent(F2D, props: EffectivePointProperties, mu, env: SolventEnvironment):
    """First Piola-Kirchhoff stress and its consistent tangent, phi(F) included.

    Returns ``P`` with shape ``(..., 2, 2)`` and ``A`` with shape ``(..., 2, 2, 2, 2)``.
    """
    F2D = np.asarray(F2D, dtype=float)
    if np.any(np.linalg.det(F2D) <= 0):
        from .errors import InvertedElementError
        raise InvertedElementError("non-positive in-plane Jacobian")
    r = point_response(_vec(F2D), props.G, props.chi, props.eta, props.theta, mu, env)
    if not r.ok.all():
        raise BracketError("swelling solve failed at one or more points")
    sh = F2D.shape[:-2]
    return r.P.reshape(sh + (2, 2)), r.A.reshape(sh + (2, 2, 2, 2))
