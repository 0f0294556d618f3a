"""Weighted finite element assembly on extruded meshes.

The bilinear form ``(1/d_s) * int y**alpha grad(v) . grad(w)`` separates on
tensor cells ``K x I`` into a 2D part (P1 stiffness and mass on ``K``) and a
1D part (moments of ``y**alpha`` against polynomial shape functions on
``I``). The 1D moments are integrated exactly; see :func:`local_moments`.
"""

from functools import lru_cache
from math import comb

import numpy as np
import scipy.sparse as sp

from .errors import InvalidOrder
from .mesh import ExtrudedMesh
from .quadrature import barycentric, gauss_rule, legendre01, map_points

# ---------------------------------------------------------------- 1D weights


def weighted_moment(ya, yb, alpha, k):
    """Closed form of ``int_ya^yb y**(alpha + k) dy``."""
    e = alpha + k + 1.0
    return (np.power(yb, e) - np.power(ya, e)) / e


def weighted_moment_table(points, alpha, kmax=6):
    """``table[l, k] = int_{I_l} y**(alpha + k) dy`` for ``k = 0..kmax``."""
    points = np.asarray(points, dtype=float)
    ks = np.arange(kmax + 1)
    return weighted_moment(points[:-1, None], points[1:, None], alpha, ks[None, :])


def local_moments(points, alpha, kmax=6):
    """``mu[l, k] = int_{I_l} y**alpha t**k dy`` with ``t = (y - y_l) / |I_l|``.

    Shape functions are polynomials in the local variable ``t``, so every
    element matrix is a combination of these moments. Intervals close to the
    origin (``y_l <= |I_l|``) use the closed-form moment table, which has no
    cancellation there; the others, where ``y**alpha`` is analytic on a
    neighbourhood of the interval, use 24-point Gauss-Legendre, exact to
    rounding for this integrand.
    """
    points = np.asarray(points, dtype=float)
    ya, yb = points[:-1], points[1:]
    h = yb - ya
    mu = np.empty((len(h), kmax + 1))
    near = ya <= h

    if near.any():
        raw = weighted_moment_table(points, alpha, kmax)[near]
        a, hn = ya[near], h[near]
        for k in range(kmax + 1):
            acc = np.zeros(a.shape)
            for j in range(k + 1):
                acc += comb(k, j) * (-a) ** (k - j) * raw[:, j]
            mu[near, k] = acc / hn ** k

    far = ~near
    if far.any():
        t, w = legendre01(24)
        a, hf = ya[far], h[far]
        y = a[:, None] + hf[:, None] * t[None, :]
        wy = hf[:, None] * w[None, :] * y ** alpha
        for k in range(kmax + 1):
            mu[far, k] = (wy * t[None, :] ** k).sum(axis=1)
    return mu


P1_SHAPES = [np.array([1.0, -1.0]), np.array([0.0, 1.0])]
P2_SHAPES = [np.array([1.0, -3.0, 2.0]), np.array([0.0, 4.0, -4.0]), np.array([0.0, -1.0, 2.0])]


def _pair_matrix(mu, test, trial, derivative):
    if derivative:
        test = [np.polynomial.polynomial.polyder(p) for p in test]
        trial = [np.polynomial.polynomial.polyder(q) for q in trial]
    out = np.zeros((len(mu), len(test), len(trial)))
    for i, p in enumerate(test):
        for j, q in enumerate(trial):
            c = np.convolve(p, q)
            out[:, i, j] = mu[:, : len(c)] @ c
    return out


def interval_element_matrices(interval, alpha, test="p1", trial="p1"):
    """Per-interval weighted mass and stiffness, shapes ``(M, nt, nr)``."""
    shapes = {"p1": P1_SHAPES, "p2": P2_SHAPES}
    te, tr = shapes[test], shapes[trial]
    mu = local_moments(interval.points, alpha, 6)
    h = interval.lengths
    mass = _pair_matrix(mu, te, tr, derivative=False)
    stiff = _pair_matrix(mu, te, tr, derivative=True) / (h ** 2)[:, None, None]
    return mass, stiff


def _node_map(M, kind):
    ell = np.arange(M)
    if kind == "p1":
        return np.stack([ell, ell + 1], axis=1)
    return np.stack([2 * ell, 2 * ell + 1, 2 * ell + 2], axis=1)


def _assemble_1d(elem, rows, cols, nr, nc):
    r = np.repeat(rows, cols.shape[1], axis=1).ravel()
    c = np.tile(cols, (1, rows.shape[1])).ravel()
    A = sp.coo_matrix((elem.ravel(), (r, c)), shape=(nr, nc)).tocsr()
    return A


def interval_matrices(interval, alpha, test="p1", trial="p1"):
    """Global 1D weighted ``(mass, stiffness)`` with the node ``y = Y`` removed.

    P1 unknowns are the levels ``0..M-1``; P2 unknowns are the nodes
    ``0..2M-1`` (even: mesh points, odd: interval midpoints).
    """
    M = interval.M
    mass, stiff = interval_element_matrices(interval, alpha, test, trial)
    size = {"p1": M + 1, "p2": 2 * M + 1}
    rows, cols = _node_map(M, test), _node_map(M, trial)
    out = []
    for elem in (mass, stiff):
        A = _assemble_1d(elem, rows, cols, size[test], size[trial])
        out.append(A[:-1, :-1].tocsr())
    return tuple(out)


# ---------------------------------------------------------------- 2D pieces


def _jacobians(base, tris=None):
    t = base.triangles if tris is None else base.triangles[tris]
    p = base.vertices[t]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns are edge vectors
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    inv = np.empty_like(J)
    inv[:, 0, 0] = J[:, 1, 1]
    inv[:, 1, 1] = J[:, 0, 0]
    inv[:, 0, 1] = -J[:, 0, 1]
    inv[:, 1, 0] = -J[:, 1, 0]
    inv /= det[:, None, None]
    return J, det, inv


REF_P1_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def p1_element_matrices(base):
    """Element stiffness and mass of P1, shapes ``(T, 3, 3)``."""
    _, det, inv = _jacobians(base)
    area = 0.5 * np.abs(det)
    grads = np.einsum("ia,tab->tib", REF_P1_GRADS, inv)
    stiff = area[:, None, None] * np.einsum("tia,tja->tij", grads, grads)
    mass = area[:, None, None] / 12.0 * (np.ones((3, 3)) + np.eye(3))[None]
    return stiff, mass


def _scatter(base, elem, n=None):
    t = base.triangles
    n = base.n_vertices if n is None else n
    r = np.repeat(t, 3, axis=1).ravel()
    c = np.tile(t, (1, 3)).ravel()
    return sp.coo_matrix((elem.ravel(), (r, c)), shape=(n, n)).tocsr()


def p1_matrices(base):
    """Full P1 stiffness and mass on all vertices (CSR)."""
    stiff, mass = p1_element_matrices(base)
    return _scatter(base, stiff), _scatter(base, mass)


def p0_p1_coupling(base):
    """``B[i, K] = int_K phi_i``; maps P0 coefficients to P1 load vectors."""
    t = base.triangles
    vals = np.repeat(base.areas / 3.0, 3)
    cols = np.repeat(np.arange(base.n_triangles), 3)
    return sp.coo_matrix((vals, (t.ravel(), cols)),
                         shape=(base.n_vertices, base.n_triangles)).tocsr()


def evaluate_function(base, f, degree):
    """Values of ``f(x1, x2)`` at the mapped points of a triangle rule."""
    pts, w = gauss_rule(degree)
    xq = map_points(base.vertices[base.triangles], pts)
    vals = np.asarray(f(xq[..., 0], xq[..., 1]), dtype=float)
    return np.broadcast_to(vals, xq.shape[:2]), w


def function_load(base, f, degree=4):
    """``int f phi_i`` on all vertices with a triangle rule of ``degree``."""
    vals, w = evaluate_function(base, f, degree)
    pts, _ = gauss_rule(degree)
    lam = barycentric(pts)
    elem = 2.0 * base.areas[:, None] * np.einsum("tq,q,qi->ti", vals, w, lam)
    return np.bincount(base.triangles.ravel(), weights=elem.ravel(), minlength=base.n_vertices)


def p1_at_points(base, u_full, degree):
    """Values of a P1 field (all vertices) at triangle quadrature points."""
    pts, _ = gauss_rule(degree)
    lam = barycentric(pts)
    return u_full[base.triangles] @ lam.T


# ------------------------------------------- local P2 + bubble reference data


@lru_cache(maxsize=None)
def p2b_reference():
    """Reference matrices for the local space P2 + cubic bubble.

    Local functions: 0-2 vertex, 3-5 edge midpoints (edge ``k`` is opposite
    vertex ``k``), 6 the bubble ``27 l0 l1 l2``. Integrated with the degree 7
    rule, exact for every product that occurs.
    """
    pts, w = gauss_rule(7)
    lam = barycentric(pts)
    l0, l1, l2 = lam.T
    vals = np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                     4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1, 27 * l0 * l1 * l2], axis=1)
    z = np.zeros_like(l0)
    dl = np.stack([
        np.stack([4 * l0 - 1, z, z], axis=1),
        np.stack([z, 4 * l1 - 1, z], axis=1),
        np.stack([z, z, 4 * l2 - 1], axis=1),
        np.stack([z, 4 * l2, 4 * l1], axis=1),
        np.stack([4 * l2, z, 4 * l0], axis=1),
        np.stack([4 * l1, 4 * l0, z], axis=1),
        np.stack([27 * l1 * l2, 27 * l0 * l2, 27 * l0 * l1], axis=1),
    ], axis=1)  # (Q, 7, 3) derivatives w.r.t. barycentrics
    dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # d lambda_i / d(xi, eta)
    grads = dl @ dlam  # (Q, 7, 2)
    stiff = np.einsum("q,qia,qjb->abij", w, grads, grads)
    mass = np.einsum("q,qi,qj->ij", w, vals, vals)
    cross_stiff = np.einsum("q,qia,jb->abij", w, grads, REF_P1_GRADS)
    cross_mass = np.einsum("q,qi,qj->ij", w, vals, lam)
    integral = vals.T @ w
    return {"stiff": stiff, "mass": mass, "cross_stiff": cross_stiff,
            "cross_mass": cross_mass, "integral": integral, "values": vals, "weights": w}


def p2b_element_matrices(base, tris=None):
    """Physical P2+bubble matrices on selected triangles.

    Returns ``stiff (T,7,7)``, ``mass (T,7,7)``, ``cross_stiff (T,7,3)``,
    ``cross_mass (T,7,3)`` (P2+bubble test against P1 trial) and
    ``integral (T,7)``.
    """
    ref = p2b_reference()
    _, det, inv = _jacobians(base, tris)
    adet = np.abs(det)
    G = np.einsum("tac,tbc->tab", inv, inv)
    stiff = adet[:, None, None] * np.einsum("tab,abij->tij", G, ref["stiff"])
    cross = adet[:, None, None] * np.einsum("tab,abij->tij", G, ref["cross_stiff"])
    mass = adet[:, None, None] * ref["mass"][None]
    cmass = adet[:, None, None] * ref["cross_mass"][None]
    integral = adet[:, None] * ref["integral"][None]
    return stiff, mass, cross, cmass, integral


# ------------------------------------------------------------------ spaces


class TensorP1Space:
    """Continuous P1(K) x P1(I) functions vanishing on the Dirichlet boundary."""

    def __init__(self, mesh: ExtrudedMesh):
        self.mesh = mesh
        self.base = mesh.base
        self.free = mesh.base.free_vertices
        self.n_free = len(self.free)
        self.M = mesh.M
        self.n_dofs = self.n_free * self.M

    def to_grid(self, V):
        """Coefficients as an ``(n_free, M)`` array (rows: free vertices, cols: levels)."""
        return np.asarray(V).reshape(self.n_free, self.M)

    def to_full(self, V):
        """Nodal values on every base vertex and level ``0..M``."""
        full = np.zeros((self.base.n_vertices, self.M + 1))
        full[self.free, : self.M] = self.to_grid(V)
        return full

    def lift_trace(self, u):
        """Tensor coefficients with level-0 values ``u`` (free vertices) and zero elsewhere."""
        V = np.zeros((self.n_free, self.M))
        V[:, 0] = u
        return V.ravel()


class TraceP1Space:
    """P1 on the base mesh with zero boundary values; the trace of TensorP1Space."""

    def __init__(self, base):
        self.base = base
        self.free = base.free_vertices
        self.n_free = len(self.free)

    def to_full(self, u):
        full = np.zeros(self.base.n_vertices)
        full[self.free] = u
        return full


class PiecewiseConstantSpace:
    def __init__(self, base):
        self.base = base
        self.n = base.n_triangles


# --------------------------------------------------------------- operators


def ds_constant(s):
    from .oracle import ds_constant as _ds

    return _ds(s)


class TensorOperator:
    """Matrix of ``a_Y`` on free DOFs, kept in Kronecker-sum form.

    ``A = (K2 (x) My + M2 (x) Ky) / d_s`` acting on coefficients ordered
    ``i * M + l``. Provides ``matvec``, ``diagonal`` and ``tosparse``.
    """

    def __init__(self, K2, M2, Ky, My, ds):
        self.K2, self.M2 = K2.tocsr(), M2.tocsr()
        self.Ky, self.My = Ky.tocsr(), My.tocsr()
        self.ds = float(ds)
        n = K2.shape[0] * Ky.shape[0]
        self.shape = (n, n)

    def matvec(self, x):
        X = x.reshape(self.K2.shape[0], self.Ky.shape[0])
        Y = (self.K2 @ X) @ self.My + (self.M2 @ X) @ self.Ky
        return (Y / self.ds).ravel()

    def apply_grid(self, X):
        return ((self.K2 @ X) @ self.My + (self.M2 @ X) @ self.Ky) / self.ds

    def __matmul__(self, x):
        return self.matvec(x)

    def diagonal(self):
        d = np.outer(self.K2.diagonal(), self.My.diagonal()) + np.outer(self.M2.diagonal(),
                                                                        self.Ky.diagonal())
        return (d / self.ds).ravel()

    def tosparse(self):
        return ((sp.kron(self.K2, self.My) + sp.kron(self.M2, self.Ky)) / self.ds).tocsr()

    def energy(self, x):
        return float(x @ self.matvec(x))


def assemble_stiffness(space, s):
    """Operator of ``a_Y(phi_i, phi_j)`` on the free DOFs of ``space``."""
    if not 0.0 < s < 1.0:
        raise InvalidOrder(f"s must lie in (0, 1), got {s}")
    alpha = 1.0 - 2.0 * s
    if abs(alpha - space.mesh.alpha) > 1e-12:
        raise InvalidOrder(f"s = {s} is inconsistent with the mesh weight alpha = {space.mesh.alpha}")
    K, Mass = p1_matrices(space.base)
    f = space.free
    K2 = K[f][:, f]
    M2 = Mass[f][:, f]
    My, Ky = interval_matrices(space.mesh.interval, alpha)
    return TensorOperator(K2, M2, Ky, My, ds_constant(s))


def trace_load_p0(base, Z):
    """``(Z, phi_i)`` on all vertices for piecewise constant ``Z``."""
    return p0_p1_coupling(base) @ np.asarray(Z, dtype=float)


def trace_load_p1(base, u_full):
    _, Mass = p1_matrices(base)
    return Mass @ np.asarray(u_full, dtype=float)


def assemble_trace_load(space, g, kind="auto", degree=4):
    """Load ``(g, tr phi_i)`` on the tensor DOFs; only level 0 is nonzero.

    ``g`` is a callable ``g(x1, x2)`` (integrated with the degree-``degree``
    rule), a piecewise constant array (one value per triangle, ``kind='p0'``)
    or P1 nodal values on all vertices (``kind='p1'``).
    """
    base = space.base
    if callable(g):
        full = function_load(base, g, degree)
    else:
        g = np.asarray(g, dtype=float)
        if kind == "auto":
            if g.shape[0] == base.n_triangles and g.shape[0] != base.n_vertices:
                kind = "p0"
            elif g.shape[0] == base.n_vertices and g.shape[0] != base.n_triangles:
                kind = "p1"
            else:
                raise ValueError("ambiguous field size; pass kind='p0' or kind='p1'")
        full = trace_load_p0(base, g) if kind == "p0" else trace_load_p1(base, g)
    return space.lift_trace(full[space.free])


def trace(space, V):
    """Level-0 coefficients of ``V``, i.e. its trace on the free base vertices."""
    return space.to_grid(V)[:, 0].copy()
