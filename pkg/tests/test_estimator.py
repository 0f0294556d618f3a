import math

import numpy as np
import pytest
import sympy
from scipy.special import roots_jacobi, roots_legendre

from fracopt.assembly import TensorP1Space
from fracopt.estimator import (AuxiliaryFields, StarReport, StarSpaces, auxiliary_fields,
                               control_contributions, control_indicator, efficiency_constant,
                               estimate, local_adjoint_indicator, local_indicators,
                               local_state_indicator, oscillation, star_local_system, star_totals,
                               subgradient_indicator)
from fracopt.linalg import is_symmetric
from fracopt.mesh import BaseMesh, initial_mesh, uniform_refine
from fracopt.optimizer import (ControlQuadruple, DiscreteSystem, ProblemData, active_set_solve,
                               solve_state, zero_quadruple)
from fracopt.quadrature import gauss_rule

from conftest import refinement_mesh

AUX = AuxiliaryFields(nu=0.5, sigma=0.1, a=-0.3, b=0.3)


def unit_triangle(scale=1.0):
    return BaseMesh(scale * np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), [[0, 1, 2]],
                    [True] * 3, perimeter=scale * (2 + math.sqrt(2)))


# ----------------------------------------------------------- constants


def test_efficiency_constant_example():
    assert math.isclose(efficiency_constant(0.5, 0.1, 0.5), 23.0, rel_tol=1e-12)


def test_efficiency_constant_lower_bound_and_limit():
    rng = np.random.default_rng(0)
    for s, sigma, nu in zip(rng.uniform(0.01, 0.99, 50), 10 ** rng.uniform(-4, 3, 50),
                            10 ** rng.uniform(-3, 3, 50)):
        assert efficiency_constant(s, sigma, nu) >= 2.0
    assert math.isclose(efficiency_constant(0.5, 1e15, 1e15), 2.0, rel_tol=1e-12)


# ------------------------------------------------------ auxiliary fields


def test_auxiliary_examples():
    nu, sigma = AUX.nu, AUX.sigma
    assert AUX.lam(0.0) == 0.0 and AUX.r(0.0) == 0.0
    assert AUX.lam(nu) == -1.0 and AUX.r(nu) == 0.0
    assert math.isclose(AUX.r(2 * nu), np.clip(-nu / sigma, AUX.a, AUX.b))
    aux = auxiliary_fields(ProblemData(s=0.5, sigma=sigma, nu=nu))
    assert aux == AUX


def test_auxiliary_invariants():
    t = np.random.default_rng(1).uniform(-3, 3, 10_000)
    lam, r = AUX.lam(t), AUX.r(t)
    assert np.all((lam >= -1) & (lam <= 1))
    assert np.all((r >= AUX.a) & (r <= AUX.b))
    assert np.all(r[np.abs(t) <= AUX.nu] == 0.0)


# ------------------------------------------------- pointwise indicators


PTS, _ = gauss_rule(7)  # reference triangle is the unit right triangle


def test_control_indicator_examples():
    area = 0.5
    tp = np.full(len(PTS), 2 * AUX.nu)
    assert control_indicator(0, AUX.r(2 * AUX.nu), tp, AUX, area) == 0.0
    c = -0.2
    got = control_indicator(0, c, np.zeros(len(PTS)), AUX, area)
    assert math.isclose(got, abs(c) * math.sqrt(area), rel_tol=1e-13)


def test_control_indicator_linear_unclamped():
    x, y = sympy.symbols("x y")
    trp = sympy.Rational(51, 100) + x / 100 + y / 200  # in (nu, nu - sigma*a): r~ linear
    r = -(trp - sympy.Rational(1, 2)) / sympy.Rational(1, 10)
    Zbar = sympy.Rational(1, 10)
    exact = sympy.integrate(sympy.integrate((Zbar - r) ** 2, (y, 0, 1 - x)), (x, 0, 1))
    vals = 0.51 + PTS[:, 0] / 100 + PTS[:, 1] / 200
    got = control_indicator(0, 0.1, vals, AUX, 0.5)
    assert math.isclose(got, math.sqrt(float(exact)), rel_tol=1e-12)


def test_subgradient_indicator_examples():
    area = 0.5
    tp = np.full(len(PTS), 0.2)
    assert subgradient_indicator(0, AUX.lam(0.2), tp, AUX, area) == 0.0
    got = subgradient_indicator(0, 1.0, np.full(len(PTS), 2.0), AUX, area)
    assert math.isclose(got, 2 * math.sqrt(area), rel_tol=1e-13)


def test_subgradient_indicator_clamped_linear():
    """lambda~ = clamp(1 - 3x, -1, 1) has a kink at x = 2/3 inside the cell."""
    x, y = sympy.symbols("x y")
    lam = sympy.Piecewise((-1, x > sympy.Rational(2, 3)), (1 - 3 * x, True))
    exact = sympy.integrate(sympy.integrate((1 - lam) ** 2, (y, 0, 1 - x)), (x, 0, 1))
    trp = -AUX.nu * (1 - 3 * PTS[:, 0])
    got = subgradient_indicator(0, 1.0, trp, AUX, 0.5)
    # the rule does not resolve the kink; agreement is to quadrature accuracy only
    assert math.isclose(got, math.sqrt(float(exact)), rel_tol=2e-2)


def test_oscillation_single_triangle():
    base = unit_triangle()
    f = PTS[:, 0][None, :]
    for s in (0.3, 0.5, 0.8):
        osc = oscillation(base, f, s)
        np.testing.assert_allclose(osc, math.sqrt(2) ** s / 6, rtol=1e-13)
    assert np.all(oscillation(base, np.full_like(f, 3.0), 0.5) <= 1e-15)


def test_oscillation_monotone_in_s():
    base = unit_triangle(0.5)  # diameter < 1
    f = (0.5 * PTS[:, 0])[None, :] ** 2
    assert np.all(oscillation(base, f, 0.8) < oscillation(base, f, 0.4))


# ------------------------------------------------------------ reduction


def test_star_totals_single_triangle():
    base = unit_triangle()
    total_sq = np.array([1.0, 2.0, 4.0])
    assert star_totals(base, total_sq).tolist() == [7.0]


def test_star_totals_fan():
    fan = uniform_refine(initial_mesh("unit-square"), 1)
    t = 0.7
    EK2 = star_totals(fan, np.full(fan.n_vertices, t * t))
    counts = np.bincount(fan.triangles.ravel())
    expected = (t * t / counts[fan.triangles]).sum(axis=1)
    np.testing.assert_allclose(EK2, expected, rtol=1e-15)
    assert math.isclose(EK2.sum(), fan.n_vertices * t * t, rel_tol=1e-14)


def test_star_totals_additivity():
    base = uniform_refine(initial_mesh("l-shape"), 3)
    total_sq = np.random.default_rng(2).uniform(0, 1, base.n_vertices)
    assert math.isclose(star_totals(base, total_sq).sum(), total_sq.sum(), rel_tol=1e-13)


def test_star_report_total():
    r = StarReport(3, 1.0, 2.0, 2.0, 0.0, 4.0)
    assert r.total == 5.0


# -------------------------------------------------- estimator on a solve


@pytest.fixture(scope="module")
def estimated(lshape_case):
    data, mesh, system, quad = lshape_case
    return estimate(system, quad, data)


def test_report_totals_match_components(estimated, lshape_case):
    for rep in estimated.reports()[::5]:
        parts = np.array([rep.E_V, rep.E_P, rep.E_Z, rep.E_Lambda, rep.osc])
        assert np.all(parts >= 0)
        assert math.isclose(rep.total ** 2, np.sum(parts ** 2), rel_tol=1e-13)
    glob = estimated.globals()
    parts = [glob[k] ** 2 for k in ("E_V", "E_P", "osc")]
    assert all(v >= 0 for v in glob.values())
    assert glob["total"] ** 2 >= sum(parts) * (1 - 1e-14)
    base = lshape_case[1].base
    EK = estimated.element_indicators(base)
    assert math.isclose(np.sum(EK ** 2), estimated.total2.sum(), rel_tol=1e-12)


def test_batched_matches_dense_reference(lshape_case):
    data, mesh, system, quad = lshape_case
    EV2, EP2 = local_indicators(system, quad, data)
    base = mesh.base
    for z in list(base.free_vertices[::9]) + list(np.flatnonzero(base.boundary)[::7]):
        _, ev = local_state_indicator(z, quad, system, data)
        _, ep = local_adjoint_indicator(z, quad, system, data)
        assert math.isclose(ev ** 2, EV2[z], rel_tol=1e-8, abs_tol=1e-20)
        assert math.isclose(ep ** 2, EP2[z], rel_tol=1e-8, abs_tol=1e-20)


def test_local_matrix_is_symmetric(lshape_case):
    _, mesh, system, _ = lshape_case
    for z in mesh.base.free_vertices[:5]:
        A, _, _ = star_local_system(system, z)
        assert is_symmetric(A)
        assert np.all(np.linalg.eigvalsh(A) > 0)


def test_zero_state_and_control_give_zero_indicators(lshape_case):
    data, mesh, system, _ = lshape_case
    quad = zero_quadruple(system.space, mesh.base.n_triangles)
    EV2, _ = local_indicators(system, quad, data)
    assert np.all(EV2 == 0)
    EZ2, EL2 = control_contributions(system, quad, data)
    assert np.all(EZ2 == 0) and np.all(EL2 == 0)


def test_adjoint_indicator_vanishes_when_trace_matches(lshape_case):
    data, mesh, system, quad = lshape_case
    full = np.zeros(mesh.base.n_vertices)
    full[system.free] = system.space.to_grid(quad.V)[:, 0]
    d2 = ProblemData(s=data.s, sigma=data.sigma, nu=data.nu, u_d=full)
    sys2 = DiscreteSystem(mesh, d2)
    q2 = ControlQuadruple(quad.V, np.zeros_like(quad.P), quad.Z, quad.Lambda)
    _, EP2 = local_indicators(sys2, q2, d2)
    assert np.max(EP2) <= 1e-28


def test_adjoint_indicator_invariant_under_common_shift(lshape_case):
    data, mesh, system, quad = lshape_case
    base = mesh.base
    g = np.sin(3 * base.vertices[:, 0]) * np.cos(2 * base.vertices[:, 1])
    g[base.boundary] = 0.0
    ud0 = np.ones(base.n_vertices)
    d0 = ProblemData(s=data.s, sigma=data.sigma, nu=data.nu, u_d=ud0)
    d1 = ProblemData(s=data.s, sigma=data.sigma, nu=data.nu, u_d=ud0 + g)
    V1 = system.space.to_grid(quad.V).copy()
    V1[:, 0] += g[system.free]
    q1 = ControlQuadruple(V1.ravel(), quad.P, quad.Z, quad.Lambda)
    _, EP0 = local_indicators(DiscreteSystem(mesh, d0), quad, d0)
    _, EP1 = local_indicators(DiscreteSystem(mesh, d1), q1, d1)
    np.testing.assert_allclose(EP1, EP0, rtol=1e-9, atol=1e-14 * EP0.max())


def test_galerkin_orthogonality_on_star_spaces(lshape_case):
    """The local residual vanishes on P1 x P1 functions of the global space.

    ``phi_z x hat_l`` lies in both the global and the local space; in the
    local nodal basis it has coefficient 1 at the vertex, 1/2 at the two edge
    midpoints through ``z``, and in ``y`` value 1 at node ``2l`` and 1/2 at
    ``2l +- 1``.
    """
    data, mesh, system, quad = lshape_case
    base = mesh.base
    spaces = StarSpaces(base)
    M = mesh.M
    for z in base.free_vertices[::11]:
        coeffs, _ = local_state_indicator(z, quad, system, data)
        A, _, n = star_local_system(system, z)
        R = (A @ coeffs.ravel()).reshape(n, 2 * M)
        sl, loc = spaces.local_rows(z)
        wx = np.zeros(n)
        wx[loc[:, 0]] = 1.0
        for col in (1, 2):
            ok = loc[:, col] >= 0
            wx[loc[ok, col]] = 0.5
        scale = np.abs(R).max()
        for ell in range(M):
            wy = np.zeros(2 * M)
            wy[2 * ell] = 1.0
            wy[2 * ell + 1] = 0.5
            if ell > 0:
                wy[2 * ell - 1] = 0.5
            assert abs(wx @ R @ wy) <= 1e-9 * scale


def _p2_nodal_basis(points, y):
    """Values and derivatives of the nodal P2 basis (nodes 0..2M-1) at ``y``."""
    M = len(points) - 1
    j = np.clip(np.searchsorted(points, y, side="right") - 1, 0, M - 1)
    h = points[j + 1] - points[j]
    t = (y - points[j]) / h
    shapes = [(1 - 3 * t + 2 * t * t, -3 + 4 * t), (4 * t - 4 * t * t, 4 - 8 * t), (-t + 2 * t * t, -1 + 4 * t)]
    val = np.zeros((len(y), 2 * M + 1))
    der = np.zeros((len(y), 2 * M + 1))
    for a, (v, d) in enumerate(shapes):
        val[np.arange(len(y)), 2 * j + a] = v
        der[np.arange(len(y)), 2 * j + a] = d / h
    return val[:, :-1], der[:, :-1]


def _p2b_symbolic():
    """P2 + bubble shape functions and their exact gradients in reference coordinates."""
    xi, eta = sympy.symbols("xi eta")
    l0, l1, l2 = 1 - xi - eta, xi, eta
    phis = [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
            4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1, 27 * l0 * l1 * l2]
    grads = [[sympy.diff(p, v) for v in (xi, eta)] for p in phis]
    return sympy.lambdify((xi, eta), phis), sympy.lambdify((xi, eta), grads)


def _p2b_at(pts, Jinv):
    vals_f, grads_f = _p2b_symbolic()
    x, y = pts[:, 0], pts[:, 1]
    one = np.ones_like(x)
    vals = np.stack([np.asarray(v) * one for v in vals_f(x, y)], axis=1)
    gref = np.array([[np.asarray(g) * one for g in row] for row in grads_f(x, y)])  # (7, 2, Q)
    return vals, np.transpose(gref, (2, 0, 1)) @ Jinv


def test_state_indicator_against_brute_force_quadrature():
    """One interior vertex: ||grad eta||^2 by pointwise quadrature in x and y."""
    s = 0.3
    base = uniform_refine(initial_mesh("unit-square"), 1)
    assert len(base.free_vertices) == 1
    z = int(base.free_vertices[0])
    data = ProblemData(s=s, sigma=0.1, nu=0.5)
    mesh = refinement_mesh(base, s)
    system = DiscreteSystem(mesh, data)
    rng = np.random.default_rng(5)
    Z = rng.uniform(-0.3, 0.3, base.n_triangles)
    V = solve_state(Z, data, mesh, system) + 0.01 * rng.standard_normal(system.space.n_dofs)
    quad = ControlQuadruple(V, np.zeros_like(V), Z, np.zeros_like(Z))
    coeffs, EV = local_state_indicator(z, quad, system, data)

    spaces = StarSpaces(base)
    sl, loc = spaces.local_rows(z)
    points = mesh.interval.points
    alpha = mesh.alpha
    # y quadrature: Gauss-Jacobi on the first interval, Gauss-Legendre elsewhere
    ys, wys = [], []
    tj, wj = roots_jacobi(20, 0.0, alpha)
    h0 = points[1]
    ys.append(h0 * (tj + 1) / 2)
    wys.append(wj * (h0 / 2) ** (1 + alpha))
    tl, wl = roots_legendre(40)
    for a, b in zip(points[1:-1], points[2:]):
        yy = a + (b - a) * (tl + 1) / 2
        ys.append(yy)
        wys.append(wl * (b - a) / 2 * yy ** alpha)
    y = np.concatenate(ys)
    wy = np.concatenate(wys)
    psi, dpsi = _p2_nodal_basis(points, y)

    pts, wx = gauss_rule(7)
    energy = 0.0
    for t, fn, lc in zip(spaces.inc_t[sl], spaces.fns[sl], loc):
        P = base.vertices[base.triangles[t]]
        J = np.column_stack([P[1] - P[0], P[2] - P[0]])
        vals, grads = _p2b_at(pts, np.linalg.inv(J))
        area = abs(np.linalg.det(J)) / 2
        C = np.zeros((7, 2 * mesh.M))
        for f, row in zip(fn, lc):
            if row >= 0:
                C[f] = coeffs[row]
        u = vals @ C  # (Qx, 2M): x-values per y-node
        gx = np.einsum("qfa,fm->qam", grads, C)
        eta_y = u @ dpsi.T
        grad_x = gx @ psi.T
        integrand = grad_x[:, 0] ** 2 + grad_x[:, 1] ** 2 + eta_y ** 2
        energy += 2 * area * np.einsum("q,qk,k->", wx, integrand, wy)
    assert math.isclose(EV ** 2, energy, rel_tol=1e-9)
    assert EV > 0


def test_estimator_is_deterministic_and_thread_invariant(lshape_case, estimated):
    data, mesh, system, quad = lshape_case
    again = estimate(system, quad, data)
    threaded = estimate(system, quad, data, jobs=2)
    for name in ("EV2", "EP2", "EZ2_star", "EL2_star", "osc2"):
        np.testing.assert_array_equal(getattr(again, name), getattr(estimated, name))
        np.testing.assert_array_equal(getattr(threaded, name), getattr(estimated, name))
        assert np.all(getattr(estimated, name) >= 0)


def test_interior_star_switch(lshape_case, estimated):
    data, mesh, system, quad = lshape_case
    inner = estimate(system, quad, data, interior_stars_only=True)
    b = mesh.base.boundary
    assert np.all(inner.total2[b] == 0)
    np.testing.assert_allclose(inner.EV2[~b], estimated.EV2[~b], rtol=1e-14)


def test_control_contributions_vanish_for_constant_trace():
    """With tr P = 0 the pointwise formulas give r~ = lambda~ = 0."""
    base = uniform_refine(initial_mesh("l-shape"), 2)
    data = ProblemData(s=0.5, sigma=0.1, nu=0.5, u_d=0.0)
    mesh = refinement_mesh(base, data.s)
    system = DiscreteSystem(mesh, data)
    quad, _ = active_set_solve(data, mesh, system=system)
    EZ2, EL2 = control_contributions(system, quad, data)
    assert np.all(EZ2 == 0) and np.all(EL2 == 0)
    space = TensorP1Space(mesh)
    assert space.n_dofs == system.space.n_dofs
