import numpy as np
import pytest

from swelltopo import adjoint, fem, material as mat
from swelltopo.adjoint import AdjointWorkspace, case_sensitivity

WATER = mat.SolventEnvironment(mu_dry=-1e5, mu_wet=-100.0)


def small_system():
    mesh = fem.build_rect_mesh(3, 2, 0.006, 0.004, thickness=1e-3)
    bcs = fem.BoundaryConditions([("left", 0, 0.0), ("left", 1, 0.0), ("right", 0, 0.0)])
    system = fem.FESystem(mesh, bcs, WATER, fem.NewtonSettings(tolerance=1e-13))
    rng = np.random.default_rng(0)
    ne = mesh.n_elements
    design = fem.DesignFields(G=10 ** rng.uniform(6, 7, ne), chi=rng.uniform(0.2, 1.0, ne),
                              eta=rng.uniform(0, 2e6, ne), theta=rng.uniform(0, np.pi, (ne, 4)))
    return mesh, system, design


def loss(system, design, a, l):
    """A mixed displacement and reaction functional."""
    s = system.load_stepping_solve(design)
    return a @ s.u + l @ s.assembly.f_int, s


@pytest.fixture(scope="module")
def setup():
    mesh, system, design = small_system()
    rng = np.random.default_rng(1)
    a = rng.standard_normal(mesh.n_dofs) * 100.0
    l = np.zeros(mesh.n_dofs)
    l[2 * mesh.nodes_in("right")] = 1.0
    L0, state = loss(system, design, a, l)
    grads, _ = case_sensitivity(AdjointWorkspace(system, state), a, l)
    return mesh, system, design, a, l, grads


@pytest.mark.parametrize("field,k", [("G", 0), ("chi", 1), ("eta", 2)])
def test_property_gradients_match_fd(setup, field, k):
    mesh, system, design, a, l, grads = setup
    g = grads[k]
    base = getattr(design, field)
    for e in (0, 3, 5):
        h = 1e-5 * max(abs(base[e]), 1e-2)
        vals = []
        for sgn in (1, -1):
            arr = base.copy()
            arr[e] += sgn * h
            d = fem.DesignFields(**{**vars(design), field: arr})
            vals.append(loss(system, d, a, l)[0])
        fd = (vals[0] - vals[1]) / (2 * h)
        assert g[e] == pytest.approx(fd, rel=1e-5, abs=1e-9 * np.abs(g).max())


def test_angle_gradients_match_fd(setup):
    mesh, system, design, a, l, grads = setup
    g = grads[3]
    for e, q in ((1, 2), (4, 0)):
        h = 1e-6
        vals = []
        for sgn in (1, -1):
            th = design.theta.copy()
            th[e, q] += sgn * h
            vals.append(loss(system, fem.DesignFields(design.G, design.chi, design.eta, th), a, l)[0])
        assert g[e, q] == pytest.approx((vals[0] - vals[1]) / (2 * h), rel=1e-5, abs=1e-9 * np.abs(g).max())


def test_adjoint_vanishes_on_fixed_dofs(setup):
    mesh, system, design, a, l, _ = setup
    state = system.load_stepping_solve(design)
    lam = adjoint.adjoint_solve(AdjointWorkspace(system, state), a)
    assert not lam[system.fixed].any()
    Kff = state.assembly.K[system.free][:, system.free]
    np.testing.assert_allclose(Kff.T @ lam[system.free], a[system.free], rtol=1e-10, atol=0)


def test_best_errors_takes_minimum():
    rows = [(1e-3, 4, 1.0, 1.1, 0.1), (1e-4, 4, 1.0, 1.0001, 1e-4), (1e-3, 7, 2.0, 2.0, 0.0)]
    assert adjoint.best_errors(rows) == {4: 1e-4, 7: 0.0}
