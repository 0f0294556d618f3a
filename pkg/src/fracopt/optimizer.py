"""Fully discrete sparse optimal control: state, adjoint, projections, active sets.

The control is piecewise constant, so the discrete variational inequality
reduces to one condition per cell written in terms of the cell average
``q_K`` of the adjoint trace::

    Lambda_K = clamp(-q_K / nu, -1, 1)
    Z_K      = clamp(-(q_K + nu * Lambda_K) / sigma, a, b)

:func:`active_set_solve` finds the fixed point of this map with a
primal-dual active set iteration: the labels of :class:`ActiveSets` are
read off ``q`` and the linear system for the free cells is solved exactly
(by an inner conjugate gradient on the reduced Hessian).
"""

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .assembly import (TensorP1Space, assemble_stiffness, evaluate_function, function_load,
                       p0_p1_coupling, p1_at_points, p1_matrices)
from .errors import MaxIterations, NonConvergence, ValidationError
from .linalg import KroneckerSolver, DEFAULT_CG_TOL
from .quadrature import gauss_rule

LOWER, FREE_NEG, ZERO, FREE_POS, UPPER = -2, -1, 0, 1, 2
LABEL_NAMES = {LOWER: "LOWER", FREE_NEG: "FREE-", ZERO: "ZERO", FREE_POS: "FREE+", UPPER: "UPPER"}

FIXED_POINT_TOL = 1e-10
DEFAULT_MAX_ITER = 100
DAMPING = 0.5


@dataclass(frozen=True)
class ProblemData:
    """Parameters of the sparse control problem.

    ``u_d`` is a callable ``u_d(x1, x2)``, a number, or nodal P1 values on
    the vertices of the base mesh in use.
    """

    s: float
    sigma: float
    nu: float
    a: float = -0.3
    b: float = 0.3
    u_d: Union[Callable, float, np.ndarray] = 1.0
    theta: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise ValidationError(f"s must lie in (0, 1), got {self.s}")
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")
        if not self.nu > 0:
            raise ValidationError(f"nu must be positive, got {self.nu}")
        if not self.a < 0.0 < self.b:
            raise ValidationError(f"control bounds need a < 0 < b, got a={self.a}, b={self.b}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValidationError(f"theta must lie in [0, 1], got {self.theta}")

    @property
    def alpha(self):
        return 1.0 - 2.0 * self.s


@dataclass(frozen=True)
class ControlQuadruple:
    """Discrete optimal variables: tensor fields ``V``, ``P``; cellwise ``Z``, ``Lambda``."""

    V: np.ndarray = field(repr=False)
    P: np.ndarray = field(repr=False)
    Z: np.ndarray = field(repr=False)
    Lambda: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class ActiveSets:
    labels: np.ndarray

    def count(self, label):
        return int(np.count_nonzero(self.labels == label))

    def __eq__(self, other):
        return isinstance(other, ActiveSets) and np.array_equal(self.labels, other.labels)

    def summary(self):
        return {name: self.count(k) for k, name in LABEL_NAMES.items()}


def desired_state_values(base, u_d, degree):
    """``u_d`` at the points of the degree-``degree`` triangle rule, shape ``(T, Q)``."""
    pts, _ = gauss_rule(degree)
    if callable(u_d):
        vals, _ = evaluate_function(base, u_d, degree)
        return np.array(vals)
    arr = np.asarray(u_d, dtype=float)
    if arr.ndim == 0:
        return np.full((base.n_triangles, len(pts)), float(arr))
    if arr.shape == (base.n_vertices,):
        return p1_at_points(base, arr, degree)
    raise ValidationError(f"u_d of shape {arr.shape} does not match the mesh")


def desired_state_load(base, u_d, degree=4):
    """``(u_d, phi_i)`` on all base vertices."""
    if callable(u_d):
        return function_load(base, u_d, degree)
    arr = np.asarray(u_d, dtype=float)
    if arr.ndim == 0:
        return function_load(base, lambda x, y: np.full(np.shape(x), float(arr)), degree)
    _, Mass = p1_matrices(base)
    return Mass @ arr


class DiscreteSystem:
    """Operators of the discrete problem on one extruded mesh.

    Holds the tensor stiffness, its fast-diagonalization solver, the trace
    mass matrix and the P0-to-load coupling. ``G`` below denotes the map
    from a level-0 load on the free base vertices to the trace of the
    discrete solution.
    """

    def __init__(self, mesh, data):
        self.mesh = mesh
        self.data = data
        self.space = TensorP1Space(mesh)
        self.base = mesh.base
        self.A = assemble_stiffness(self.space, data.s)
        self.solver = KroneckerSolver(self.A.K2, self.A.M2, self.A.Ky, self.A.My, self.A.ds)
        free = self.space.free
        self.free = free
        self.areas = self.base.areas
        self.B0 = p0_p1_coupling(self.base)[free]
        self.Mt = self.A.M2
        self.ud_load = desired_state_load(self.base, data.u_d, 4)[free]
        self.G_ud = self.G(self.ud_load)

    def G(self, f):
        return self.solver.trace_solve(np.asarray(f, dtype=float))

    def trace_of_control(self, Z):
        return self.G(self.B0 @ Z)

    def q_from_trace(self, u):
        """Cell averages of the adjoint trace for a state trace ``u``."""
        trP = self.G(self.Mt @ u) - self.G_ud
        return (self.B0.T @ trP) / self.areas

    def hessian(self, Z):
        """``H Z = B0^T G Mt G B0 Z`` without the Tikhonov part."""
        return self.B0.T @ self.G(self.Mt @ self.trace_of_control(Z))

    def solve(self, b, tol=DEFAULT_CG_TOL):
        return solve_tensor_system(self.A, self.solver, b, tol)


def solve_tensor_system(A, solver, b, tol=DEFAULT_CG_TOL, max_refinements=4):
    """Direct Kronecker solve polished by iterative refinement.

    Stops at ``||A x - b|| <= tol ||b||``. On strongly graded meshes the
    Euclidean residual can have a rounding floor above ``tol``; the solve
    is then accepted if the residual sits within a factor 10 of that floor.
    """
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    x = solver.solve(b)
    res = np.linalg.norm(b - A.matvec(x))
    for _ in range(max_refinements):
        if res <= tol * bnorm:
            return x
        x_new = x + solver.solve(b - A.matvec(x))
        res_new = np.linalg.norm(b - A.matvec(x_new))
        if res_new >= res:
            break
        x, res = x_new, res_new
    if res <= tol * bnorm:
        return x
    floor = _residual_floor(A, x)
    if res <= 10.0 * floor:
        return x
    raise NonConvergence(f"tensor solve stuck at relative residual {res / bnorm:.3e}",
                         residual=res / bnorm)


def _residual_floor(A, x):
    X = np.abs(x.reshape(A.K2.shape[0], A.Ky.shape[0]))
    t = abs(A.K2) @ X @ abs(A.My) + abs(A.M2) @ X @ abs(A.Ky)
    return 4.0 * np.finfo(float).eps * np.linalg.norm(t) / A.ds


def _system(mesh, data, system):
    return system if system is not None else DiscreteSystem(mesh, data)


def solve_state(Z, data, mesh, system=None):
    """Tensor coefficients of ``V`` with ``a_Y(V, W) = (Z, tr W)``."""
    sysm = _system(mesh, data, system)
    Z = np.asarray(Z, dtype=float)
    if Z.shape != (sysm.base.n_triangles,):
        raise ValidationError(f"Z needs one value per triangle, got shape {Z.shape}")
    b = sysm.space.lift_trace(sysm.B0 @ Z)
    return sysm.solve(b)


def solve_adjoint(V, data, mesh, system=None):
    """Tensor coefficients of ``P`` with ``a_Y(W, P) = (tr V - u_d, tr W)``."""
    sysm = _system(mesh, data, system)
    u = sysm.space.to_grid(V)[:, 0]
    b = sysm.space.lift_trace(sysm.Mt @ u - sysm.ud_load)
    return sysm.solve(b)


def cell_average_trace(space, P, K=None):
    """``q_K = |K|^{-1} int_K tr P``; all cells when ``K`` is None."""
    base = space.base
    full = np.zeros(base.n_vertices)
    full[space.free] = space.to_grid(P)[:, 0]
    q = full[base.triangles].mean(axis=1)
    return q if K is None else q[K]


def project_subgradient(q, nu):
    """``clamp(-q / nu, -1, 1)``."""
    return np.clip(-np.asarray(q, dtype=float) / nu, -1.0, 1.0)


def project_control(q, lam, data):
    """``clamp(-(q + nu * lam) / sigma, a, b)``."""
    q = np.asarray(q, dtype=float)
    return np.clip(-(q + data.nu * np.asarray(lam, dtype=float)) / data.sigma, data.a, data.b)


def fixed_point_map(q, data):
    """``(Z, Lambda)`` from the cellwise projection formulas."""
    lam = project_subgradient(q, data.nu)
    Z = project_control(q, lam, data)
    # |q| <= nu lands exactly on zero (the tie |q| = nu included)
    Z = np.where(np.abs(q) <= data.nu, 0.0, Z)
    return Z, lam


def classify(q, data):
    """Active-set labels of the cells for adjoint averages ``q``."""
    q = np.asarray(q, dtype=float)
    nu, sig = data.nu, data.sigma
    labels = np.full(q.shape, ZERO, dtype=np.int8)
    labels[q < -nu] = FREE_POS
    labels[q <= -nu - sig * data.b] = UPPER
    labels[q > nu] = FREE_NEG
    labels[q >= nu - sig * data.a] = LOWER
    return ActiveSets(labels)


def _l2_cells(areas, v):
    return float(np.sqrt(np.sum(areas * v * v)))


def _free_solve(sysm, data, labels, Z, tol):
    """Newton step: fix the clamped/zero cells and solve for the free ones."""
    sig, nu = data.sigma, data.nu
    D = sysm.areas
    Znew = np.where(labels == UPPER, data.b, np.where(labels == LOWER, data.a, 0.0))
    F = np.flatnonzero((labels == FREE_POS) | (labels == FREE_NEG))
    if F.size == 0:
        return Znew, 0
    sign = np.where(labels[F] == FREE_POS, 1.0, -1.0)
    g = sysm.B0.T @ sysm.G_ud
    rhs = g[F] - nu * sign * D[F] - sysm.hessian(Znew)[F]

    def apply(x):
        full = np.zeros_like(Z)
        full[F] = x
        return sig * D[F] * x + sysm.hessian(full)[F]

    x = np.clip(Z[F], data.a, data.b)
    r = rhs - apply(x)
    dinv = 1.0 / ((sig + 1e-300) * D[F])
    target = max(tol * sig, 1e-15 * np.sqrt(rhs @ (rhs / D[F])))
    z = dinv * r
    p = z.copy()
    rz = r @ z
    its = 0
    for its in range(1, 10 * F.size + 50):
        if np.sqrt(r @ (r / D[F])) <= target:
            break
        Ap = apply(p)
        step = rz / (p @ Ap)
        x += step * p
        r -= step * Ap
        if its % 50 == 0:
            r = rhs - apply(x)
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    Znew[F] = x
    return Znew, its


def active_set_solve(data, mesh, init=None, system=None, max_iter=DEFAULT_MAX_ITER,
                     tol=FIXED_POINT_TOL, return_info=False):
    """Solve the discrete optimality system.

    Parameters
    ----------
    data : ProblemData
    mesh : ExtrudedMesh
    init : ControlQuadruple or array, optional
        Starting control (``Z = 0`` by default).
    system : DiscreteSystem, optional
        Reused operators for ``mesh``.

    Returns
    -------
    quad : ControlQuadruple
    iterations : int
        Outer iterations, each one evaluation of the projection map.

    Raises
    ------
    MaxIterations
        Neither the undamped nor the damped (``omega = 0.5``) run met the
        stopping test within ``max_iter`` iterations.
    """
    sysm = _system(mesh, data, system)
    nT = sysm.base.n_triangles
    if init is None:
        Z0 = np.zeros(nT)
    else:
        Z0 = np.asarray(init.Z if isinstance(init, ControlQuadruple) else init, dtype=float)
        if Z0.shape != (nT,):
            raise ValidationError(f"initial control has shape {Z0.shape}, expected ({nT},)")
        Z0 = np.clip(Z0, data.a, data.b)

    history = []
    for omega in (1.0, DAMPING):
        result = _pdas(sysm, data, Z0, max_iter, tol, omega, history)
        if result is not None:
            break
    else:
        raise MaxIterations(f"active set iteration did not converge in {max_iter} steps "
                            f"(also with damping {DAMPING})")
    Z, lam, iterations = result

    # Z and Lambda come from one projection, so their sign structure is exact
    V = solve_state(Z, data, mesh, sysm)
    P = solve_adjoint(V, data, mesh, sysm)
    q = cell_average_trace(sysm.space, P)
    quad = ControlQuadruple(V, P, Z, lam)
    if return_info:
        return quad, iterations, {"history": history, "q": q, "labels": classify(q, data),
                                  "damped": omega != 1.0}
    return quad, iterations


def _pdas(sysm, data, Z0, max_iter, tol, omega, history):
    Z = Z0.copy()
    prev = None
    for k in range(1, max_iter + 1):
        u = sysm.trace_of_control(Z)
        q = sysm.q_from_trace(u)
        labels = classify(q, data)
        Zp, lam = fixed_point_map(q, data)
        change = _l2_cells(sysm.areas, Zp - Z)
        history.append({"omega": omega, "iteration": k, "change": change,
                        "free": int(np.count_nonzero(np.abs(labels.labels) == 1))})
        if change <= tol and (prev is None or labels == prev):
            return Zp, lam, k
        prev = labels
        Zn, _ = _free_solve(sysm, data, labels.labels, Z, 1e-3 * tol)
        Z = Zn if omega == 1.0 else Z + omega * (Zn - Z)
    return None


def objective(quad, data, mesh, system=None):
    """``1/2 ||tr V - u_d||^2 + sigma/2 ||Z||^2 + nu ||Z||_1``.

    The tracking term uses the degree-4 triangle rule; the control terms
    are exact for piecewise constants.
    """
    base = mesh.base
    space = system.space if system is not None else TensorP1Space(mesh)
    full = np.zeros(base.n_vertices)
    full[space.free] = space.to_grid(quad.V)[:, 0]
    pts, w = gauss_rule(4)
    tv = p1_at_points(base, full, 4)
    ud = desired_state_values(base, data.u_d, 4)
    area = base.areas
    track = 0.5 * np.sum(2.0 * area[:, None] * w[None, :] * (tv - ud) ** 2)
    Z = np.asarray(quad.Z)
    return float(track + 0.5 * data.sigma * np.sum(area * Z * Z) + data.nu * np.sum(area * np.abs(Z)))


def zero_quadruple(space, n_triangles):
    n = space.n_dofs
    return ControlQuadruple(np.zeros(n), np.zeros(n), np.zeros(n_triangles), np.zeros(n_triangles))


def inherit(quad_or_Z, new_base):
    """Transfer a cellwise control to a refined mesh through ``new_base.parent``."""
    Z = quad_or_Z.Z if isinstance(quad_or_Z, ControlQuadruple) else np.asarray(quad_or_Z)
    return np.asarray(Z)[new_base.parent]


def vi_residual(q, Z, lam, data):
    """Smallest normalized value of ``(q + sigma Z + nu Lambda)(z - Z)`` over ``z in {a, 0, b}``."""
    q = np.asarray(q)
    g = q + data.sigma * np.asarray(Z) + data.nu * np.asarray(lam)
    worst = np.inf
    for zt in (data.a, 0.0, data.b):
        worst = min(worst, float(np.min(g * (zt - Z) / (1.0 + np.abs(q)))))
    return worst
