"""Independent reference solutions written from the governing equations in high precision.

Nothing here imports the package under test.
"""
from __future__ import annotations

import mpmath as mp

R_GAS = 8.314

mp.mp.dps = 40


def swelling_residual(phi, a, G, chi, mu, mu0=0.0, omega=1.8e-5, T=298.0):
    """Flory-Rehner equilibrium residual with area stretch ``a`` (mpmath)."""
    phi, a = mp.mpf(phi), mp.mpf(a)
    RT = mp.mpf(R_GAS) * T
    return ((mp.mpf(mu0) - mu) / RT + mp.log(1 - phi) + phi + chi * phi**2
            + mp.mpf(omega) * G / RT * (1 / (phi * a * a) - phi))


def swelling_residual_s(s, a, G, chi, mu, mu0=0.0, omega=1.8e-5, T=298.0):
    """The same residual written in the solvent fraction ``s = 1 - phi``, exact near phi = 1."""
    s, a = mp.mpf(s), mp.mpf(a)
    phi = 1 - s
    RT = mp.mpf(R_GAS) * T
    return ((mp.mpf(mu0) - mu) / RT + mp.log(s) + phi + chi * phi**2
            + mp.mpf(omega) * G / RT * (1 / (phi * a * a) - phi))


def swelling_root(a, G, chi, mu, n_scan=10**6, **kw):
    """Root in (0, 1) located by a dense scan for the sign change, then refined by bisection."""
    import numpy as np

    RT = R_GAS * kw.get("T", 298.0)
    omega = kw.get("omega", 1.8e-5)
    mu0 = kw.get("mu0", 0.0)
    # a coarse float scan just brackets the root; mpmath does the rest
    x = np.linspace(1e-6, 1 - 1e-9, n_scan)
    with np.errstate(divide="ignore"):
        f = (mu0 - mu) / RT + np.log1p(-x) + x + chi * x**2 + omega * G / RT * (1 / (x * a * a) - x)
    k = np.flatnonzero(np.sign(f[:-1]) != np.sign(f[1:]))
    if k.size != 1:
        raise ValueError(f"expected exactly one sign change, found {k.size}")
    lo, hi = x[k[0]], x[k[0] + 1]
    return mp.findroot(lambda p: swelling_residual(p, a, G, chi, mu, **kw), (lo, hi), solver="bisect",
                       tol=mp.mpf(10) ** -35, maxsteps=400)


def _phi_of_stretch(lam, G, chi, mu, guess, **kw):
    a = lam * lam
    f = lambda p: swelling_residual(p, a, G, chi, mu, **kw)  # noqa: E731
    # bracket around the guess (residual decreases in phi); a secant step can leave (0, 1)
    lo, hi = guess / 2, 1 - (1 - guess) / 2
    while f(lo) < 0:
        lo /= 2
    while f(hi) > 0:
        hi = 1 - (1 - hi) / 2
    return mp.findroot(f, (lo, hi), solver="anderson", tol=mp.mpf(10) ** -35, maxsteps=500)


def free_swelling(G, chi, mu, **kw):
    """Equi-biaxial in-plane stretch and polymer fraction of an unconstrained gel sheet.

    The in-plane energy per unit reference volume with the polymer fraction
    re-equilibrated at every stretch is
    ``E(l) = G/2 (2 l^2 + 1/(phi^2 l^4) - 3 + 2 ln phi)``; its stationary
    point is the stress-free state.
    """
    phi1 = swelling_root(1.0, G, chi, mu, n_scan=200_000, **kw)

    def energy(lam):
        phi = _phi_of_stretch(lam, G, chi, mu, phi1, **kw)
        return G / 2 * (2 * lam**2 + 1 / (phi**2 * lam**4) - 3 + 2 * mp.log(phi))

    guess = phi1 ** (-mp.mpf(1) / 3)
    lam = mp.findroot(lambda l: mp.diff(energy, l), guess, tol=mp.mpf(10) ** -25)
    return float(lam), float(_phi_of_stretch(lam, G, chi, mu, phi1, **kw))


def uniaxial_lateral_stretch(lam1, G, chi, mu, **kw):
    """Lateral stretch of a sheet pulled to ``lam1`` with free lateral edges (same energy as above)."""
    phi1 = swelling_root(1.0, G, chi, mu, n_scan=200_000, **kw)

    def energy(lam2):
        phi = _phi_of_stretch(mp.sqrt(lam1 * lam2), G, chi, mu, phi1, **kw)
        return G / 2 * (lam1**2 + lam2**2 + 1 / (phi**2 * lam1**2 * lam2**2) - 3 + 2 * mp.log(phi))

    lam2 = mp.findroot(lambda l: mp.diff(energy, l), mp.mpf(1) / mp.sqrt(lam1), tol=mp.mpf(10) ** -25)
    return float(lam2)
