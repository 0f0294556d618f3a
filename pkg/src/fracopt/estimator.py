"""Star-local a posteriori error estimator.

For every vertex ``z`` of the base mesh the residuals of the state and
adjoint equations are tested against the local space

    W(C_z) = {P2 + bubble on S_z, zero on the star boundary} x {P2 on (0, Y), zero at Y}

and the indicator is the weighted energy of the local Riesz representer,
``E_V^2 = ||grad eta||^2_{L2(y^alpha, C_z)}``.

The local matrix is ``G = K2 (x) My + M2 (x) Ky``. The 1D pair is the same
for every star and is diagonalized once; the 2D pair is diagonalized per
star (a generalized eigenproblem of size at most ~20). With ``Ux`` and
``Vy`` the two eigenbases,

    r^T G^{-1} r = sum_{ij} (Ux^T R Vy)_{ij}^2 / (mu_i c_j + 1),

so no local system is ever factored densely. :func:`local_state_indicator`
and :func:`local_adjoint_indicator` assemble the full Kronecker matrix of a
single star and solve it with :func:`dense_solve`; they serve as the
reference implementation.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .assembly import interval_matrices, p2b_element_matrices, p2b_reference
from .linalg import dense_solve
from .mesh import star_sizes
from .optimizer import desired_state_values
from .quadrature import barycentric, gauss_rule
from .oracle import ds_constant

CHUNK_ENTRIES = 2_000_000


@dataclass(frozen=True)
class StarReport:
    """Estimator contributions of one cylindrical star."""

    z: int
    E_V: float
    E_P: float
    E_Z: float
    E_Lambda: float
    osc: float

    @property
    def total(self):
        return float(np.sqrt(self.E_V ** 2 + self.E_P ** 2 + self.E_Z ** 2
                             + self.E_Lambda ** 2 + self.osc ** 2))


@dataclass(frozen=True)
class AuxiliaryFields:
    """Pointwise ``lambda~`` and ``r~`` built from the adjoint trace."""

    nu: float
    sigma: float
    a: float
    b: float

    def lam(self, trP):
        return np.clip(-np.asarray(trP) / self.nu, -1.0, 1.0)

    def r(self, trP):
        trP = np.asarray(trP)
        out = np.clip(-(trP + self.nu * self.lam(trP)) / self.sigma, self.a, self.b)
        return np.where(np.abs(trP) <= self.nu, 0.0, out)


def auxiliary_fields(data):
    return AuxiliaryFields(data.nu, data.sigma, data.a, data.b)


def efficiency_constant(s, sigma, nu):
    """``max{2, d_s^(1/2) + 1, d_s^(-1/2) (1/nu + 2/sigma + d_s^(1/2)), 1}``."""
    ds = ds_constant(s)
    r = np.sqrt(ds)
    return float(max(2.0, r + 1.0, (1.0 / nu + 2.0 / sigma + r) / r, 1.0))


# ------------------------------------------------------------ local spaces


class StarSpaces:
    """Degrees of freedom of the local quadratic spaces of all stars.

    Every star-triangle incidence ``(t, iz)`` (triangle ``t`` seen from its
    local vertex ``iz``) contributes up to four local functions of ``t``:
    the vertex function of ``z`` (if ``z`` is an interior vertex of the
    domain), the two midpoint functions of the edges through ``z`` (if the
    edge is interior) and the bubble. Functions attached to the outer
    ring of the star vanish there and are dropped.
    """

    def __init__(self, base):
        self.base = base
        T = base.n_triangles
        tris = base.triangles
        inc_t = np.repeat(np.arange(T), 3)
        inc_iz = np.tile(np.arange(3), T)
        inc_z = tris[inc_t, inc_iz]
        order = np.argsort(inc_z, kind="stable")
        inc_t, inc_iz, inc_z = inc_t[order], inc_iz[order], inc_z[order]

        e2e = base.elem2edge
        interior_edge = base.edge_multiplicity == 2
        n_inc = len(inc_t)
        fns = -np.ones((n_inc, 4), dtype=np.int64)
        kind = np.zeros((n_inc, 4), dtype=np.int64)
        ident = np.zeros((n_inc, 4), dtype=np.int64)

        vert_ok = ~base.boundary[inc_z]
        fns[vert_ok, 0] = inc_iz[vert_ok]
        kind[:, 0] = 0
        ident[:, 0] = 0
        for col, shift in ((1, 1), (2, 2)):
            k = (inc_iz + shift) % 3
            edge = e2e[inc_t, k]
            ok = interior_edge[edge]
            fns[ok, col] = 3 + k[ok]
            kind[:, col] = 1
            ident[:, col] = edge
        fns[:, 3] = 6
        kind[:, 3] = 2
        ident[:, 3] = inc_t

        big = max(base.n_vertices, len(base.edges), T) + 1
        valid = fns >= 0
        keys = np.where(valid, inc_z[:, None] * (3 * big) + kind * big + ident, -1)
        uniq, inv = np.unique(keys[valid], return_inverse=True)
        rows = -np.ones((n_inc, 4), dtype=np.int64)
        rows[valid] = inv
        row_star = uniq // (3 * big)
        self.ptr = np.searchsorted(row_star, np.arange(base.n_vertices + 1))
        self.n_local = np.diff(self.ptr)
        self.inc_t, self.inc_z = inc_t, inc_z
        self.inc_ptr = np.searchsorted(inc_z, np.arange(base.n_vertices + 1))
        self.fns = fns
        self.rows = rows
        self.n_rows = len(uniq)

    def local_rows(self, z):
        """Incidence slice of star ``z`` and the local row index of each kept function."""
        sl = slice(self.inc_ptr[z], self.inc_ptr[z + 1])
        return sl, np.where(self.rows[sl] >= 0, self.rows[sl] - self.ptr[z], -1)


def _star_2d_matrices(spaces, stiff, mass, stars):
    """Batched local 2D stiffness and mass of stars that share one local size."""
    n = int(spaces.n_local[stars[0]])
    ns = len(stars)
    K = np.zeros((ns, n, n))
    Mm = np.zeros((ns, n, n))
    for g, z in enumerate(stars):
        sl, loc = spaces.local_rows(z)
        t = spaces.inc_t[sl]
        f = spaces.fns[sl]
        for a in range(4):
            for b in range(4):
                ok = (loc[:, a] >= 0) & (loc[:, b] >= 0)
                if not ok.any():
                    continue
                np.add.at(K[g], (loc[ok, a], loc[ok, b]), stiff[t[ok], f[ok, a], f[ok, b]])
                np.add.at(Mm[g], (loc[ok, a], loc[ok, b]), mass[t[ok], f[ok, a], f[ok, b]])
    return K, Mm


def _generalized_eigh_batched(K, Mm):
    """``Ux, mu`` with ``Ux^T Mm Ux = I`` and ``Ux^T K Ux = diag(mu)`` per batch entry."""
    L = np.linalg.cholesky(Mm)
    Linv = np.linalg.inv(L)
    C = Linv @ K @ np.swapaxes(Linv, 1, 2)
    C = 0.5 * (C + np.swapaxes(C, 1, 2))
    mu, Q = np.linalg.eigh(C)
    Ux = np.swapaxes(Linv, 1, 2) @ Q
    return Ux, mu


def y_eigenbasis(interval, alpha):
    """P2 weighted 1D pair on ``(0, Y)`` diagonalized: ``Vy^T Ky Vy = I``, ``Vy^T My Vy = diag(c)``."""
    My, Ky = interval_matrices(interval, alpha, "p2", "p2")
    My, Ky = My.toarray(), Ky.toarray()
    L = scipy.linalg.cholesky(Ky, lower=True)
    W = scipy.linalg.solve_triangular(L, My, lower=True)
    C = scipy.linalg.solve_triangular(L, W.T, lower=True)
    c, Q = scipy.linalg.eigh(0.5 * (C + C.T))
    Vy = scipy.linalg.solve_triangular(L.T, Q, lower=False)
    return np.maximum(c, 0.0), Vy, My, Ky


class _ResidualData:
    """Per-triangle residual pieces in the 1D eigenbasis.

    ``elem(t, f)`` returns the residual row of local function ``f`` of
    triangle ``t`` with shape ``(..., 2M)``.
    """

    def __init__(self, system, quad, data, y_pair):
        base = system.base
        mesh = system.mesh
        self.ds = system.A.ds
        c, Vy, _, _ = y_pair
        alpha = mesh.alpha
        Myc, Kyc = interval_matrices(mesh.interval, alpha, "p2", "p1")
        space = system.space

        def full_grid(X):
            F = np.zeros((base.n_vertices, mesh.M))
            F[space.free] = space.to_grid(X)
            return F

        Vf = full_grid(quad.V)
        Pf = full_grid(quad.P)
        self.W1V = Vf @ (Myc.T @ Vy)
        self.W2V = Vf @ (Kyc.T @ Vy)
        self.W1P = Pf @ (Myc.T @ Vy)
        self.W2P = Pf @ (Kyc.T @ Vy)
        self.e0 = Vy[0].copy()
        self.stiff, self.mass, self.cross, self.cmass, self.integral = p2b_element_matrices(base)
        self.tris = base.triangles
        self.Z = np.asarray(quad.Z, dtype=float)
        self.v0 = Vf[:, 0]
        ref = p2b_reference()
        ud = desired_state_values(base, data.u_d, 7)
        w = ref["weights"]
        # int u_d w_i on each triangle, degree-7 rule
        self.ud_int = 2.0 * base.areas[:, None] * np.einsum("tq,q,qi->ti", ud, w, ref["values"])

    def state_rows(self, t, f):
        tri = self.tris[t]
        cr = self.cross[t, f]  # (..., 3)
        cm = self.cmass[t, f]
        aV = np.einsum("nj,njm->nm", cr, self.W1V[tri]) + np.einsum("nj,njm->nm", cm, self.W2V[tri])
        load = (self.Z[t] * self.integral[t, f])[:, None] * self.e0[None, :]
        return load - aV / self.ds

    def adjoint_rows(self, t, f):
        tri = self.tris[t]
        cr = self.cross[t, f]
        cm = self.cmass[t, f]
        aP = np.einsum("nj,njm->nm", cr, self.W1P[tri]) + np.einsum("nj,njm->nm", cm, self.W2P[tri])
        trv = np.einsum("nj,nj->n", cm, self.v0[tri])
        load = (trv - self.ud_int[t, f])[:, None] * self.e0[None, :]
        return load - aP / self.ds


def _star_chunk(stars, spaces, rd, c):
    """E_V^2, E_P^2 for a list of stars of equal local size."""
    K, Mm = _star_2d_matrices(spaces, rd.stiff, rd.mass, stars)
    Ux, mu = _generalized_eigh_batched(K, Mm)
    n = K.shape[1]
    m = len(c)
    RV = np.zeros((len(stars), n, m))
    RP = np.zeros((len(stars), n, m))
    for g, z in enumerate(stars):
        sl, loc = spaces.local_rows(z)
        t = spaces.inc_t[sl]
        f = spaces.fns[sl]
        ok = loc >= 0
        tt = np.broadcast_to(t[:, None], f.shape)[ok]
        ff = f[ok]
        ll = loc[ok]
        np.add.at(RV[g], ll, rd.state_rows(tt, ff))
        np.add.at(RP[g], ll, rd.adjoint_rows(tt, ff))
    denom = mu[:, :, None] * c[None, None, :] + 1.0
    UT = np.swapaxes(Ux, 1, 2)
    hatV = UT @ RV
    hatP = UT @ RP
    ds2 = rd.ds ** 2
    EV2 = ds2 * np.sum(hatV ** 2 / denom, axis=(1, 2))
    EP2 = ds2 * np.sum(hatP ** 2 / denom, axis=(1, 2))
    return EV2, EP2


def _chunks(spaces, stars, m):
    """Split stars into groups of equal local size, bounded in memory."""
    sizes = spaces.n_local[stars]
    out = []
    for n in np.unique(sizes):
        group = stars[sizes == n]
        per = max(1, CHUNK_ENTRIES // max(1, n * m))
        for i in range(0, len(group), per):
            out.append(group[i:i + per])
    return out


def local_indicators(system, quad, data, jobs=1, stars=None, y_pair=None):
    """``(E_V^2, E_P^2)`` for every vertex star (zero for skipped stars)."""
    base = system.base
    mesh = system.mesh
    if y_pair is None:
        y_pair = y_eigenbasis(mesh.interval, mesh.alpha)
    c = y_pair[0]
    spaces = StarSpaces(base)
    rd = _ResidualData(system, quad, data, y_pair)
    if stars is None:
        stars = np.arange(base.n_vertices)
    stars = np.asarray(stars, dtype=np.int64)
    EV2 = np.zeros(base.n_vertices)
    EP2 = np.zeros(base.n_vertices)
    chunks = _chunks(spaces, stars, len(c))

    def work(chunk):
        return chunk, _star_chunk(chunk, spaces, rd, c)

    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=int(jobs)) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(ch) for ch in chunks]
    for chunk, (ev, ep) in results:
        EV2[chunk] = ev
        EP2[chunk] = ep
    return EV2, EP2


# ---------------------------------------------------- dense single-star path


def star_local_system(system, z, y_pair=None):
    """Dense local matrix ``a_z`` (with the 1/d_s factor) of the star of ``z``.

    Returns ``(A, spaces, n_x)``; unknowns are ordered ``x-index * 2M + y-index``.
    """
    mesh = system.mesh
    if y_pair is None:
        y_pair = y_eigenbasis(mesh.interval, mesh.alpha)
    _, _, My, Ky = y_pair
    spaces = StarSpaces(system.base)
    stiff, mass, *_ = p2b_element_matrices(system.base)
    K, Mm = _star_2d_matrices(spaces, stiff, mass, [z])
    A = (np.kron(K[0], My) + np.kron(Mm[0], Ky)) / system.A.ds
    return A, spaces, K.shape[1]


def _dense_indicator(system, z, quad, data, which, y_pair=None):
    mesh = system.mesh
    if y_pair is None:
        y_pair = y_eigenbasis(mesh.interval, mesh.alpha)
    c, Vy, My, Ky = y_pair
    A, spaces, n = star_local_system(system, z, y_pair)
    # identity in place of Vy: residual rows in the nodal P2 basis
    rd = _ResidualData(system, quad, data, (c, np.eye(len(c)), My, Ky))
    sl, loc = spaces.local_rows(z)
    t = spaces.inc_t[sl]
    f = spaces.fns[sl]
    ok = loc >= 0
    tt = np.broadcast_to(t[:, None], f.shape)[ok]
    R = np.zeros((n, len(c)))
    rows = rd.state_rows(tt, f[ok]) if which == "state" else rd.adjoint_rows(tt, f[ok])
    np.add.at(R, loc[ok], rows)
    r = R.ravel()
    coeffs = dense_solve(A, r)
    energy = float(coeffs @ (A @ coeffs)) * system.A.ds
    return coeffs.reshape(n, len(c)), np.sqrt(max(energy, 0.0))


def local_state_indicator(z, quad, system, data):
    """``(eta coefficients, E_V)`` of star ``z`` by a dense local solve.

    ``eta`` solves ``a_z(eta, W) = <Z, tr W> - a_z(V, W)`` on the local
    space; ``E_V = ||grad eta||_{L2(y^alpha, C_z)}``.
    """
    return _dense_indicator(system, z, quad, data, "state")


def local_adjoint_indicator(z, quad, system, data):
    """``(theta coefficients, E_P)`` of star ``z`` by a dense local solve."""
    return _dense_indicator(system, z, quad, data, "adjoint")


# ------------------------------------------------ pointwise contributions


def _trace_full(system, X):
    full = np.zeros(system.base.n_vertices)
    full[system.space.free] = system.space.to_grid(X)[:, 0]
    return full


def control_contributions(system, quad, data, degree=7):
    """Per-triangle ``E_Z(K)^2`` and ``E_Lambda(K)^2`` (degree-7 rule)."""
    base = system.base
    pts, w = gauss_rule(degree)
    lam = barycentric(pts)
    trP = _trace_full(system, quad.P)[base.triangles] @ lam.T
    aux = auxiliary_fields(data)
    weights = 2.0 * base.areas[:, None] * w[None, :]
    EZ2 = np.sum(weights * (np.asarray(quad.Z)[:, None] - aux.r(trP)) ** 2, axis=1)
    EL2 = np.sum(weights * (np.asarray(quad.Lambda)[:, None] - aux.lam(trP)) ** 2, axis=1)
    return EZ2, EL2


def control_indicator(K, Zbar, trP_values, aux, area, degree=7):
    """``||Z_K - r~||_{L2(K)}`` from ``tr P`` at the degree-7 points of ``K``."""
    _, w = gauss_rule(degree)
    d = Zbar - aux.r(trP_values)
    return float(np.sqrt(np.sum(2.0 * area * w * d * d)))


def subgradient_indicator(K, Lbar, trP_values, aux, area, degree=7):
    """``||Lambda_K - lambda~||_{L2(K)}``."""
    _, w = gauss_rule(degree)
    d = Lbar - aux.lam(trP_values)
    return float(np.sqrt(np.sum(2.0 * area * w * d * d)))


def cell_oscillation(base, f_values, degree=7):
    """``||f - mean_K f||^2_{L2(K)}`` per triangle from values at the rule's points."""
    _, w = gauss_rule(degree)
    weights = 2.0 * base.areas[:, None] * w[None, :]
    mean = np.sum(weights * f_values, axis=1) / base.areas
    return np.sum(weights * (f_values - mean[:, None]) ** 2, axis=1)


def oscillation(base, f_values, s, degree=7):
    """Star oscillation ``h_z^s ||f - f_K||_{L2(S_z)}`` for every vertex."""
    cell = cell_oscillation(base, f_values, degree)
    per_vertex = np.bincount(base.triangles.ravel(), weights=np.repeat(cell, 3),
                             minlength=base.n_vertices)
    return star_sizes(base) ** s * np.sqrt(per_vertex)


def state_misfit_values(system, quad, data, degree=7):
    """``tr V - u_d`` at the points of the degree-7 rule."""
    base = system.base
    pts, _ = gauss_rule(degree)
    lam = barycentric(pts)
    trV = _trace_full(system, quad.V)[base.triangles] @ lam.T
    return trV - desired_state_values(base, data.u_d, degree)


# ------------------------------------------------------------- reduction


def star_totals(base, total_sq):
    """Element indicators ``E_K^2 = sum_{z in K} total_z^2 / #S_z``."""
    counts = np.bincount(base.triangles.ravel(), minlength=base.n_vertices)
    share = np.where(counts > 0, total_sq / np.maximum(counts, 1), 0.0)
    return share[base.triangles].sum(axis=1)


@dataclass
class EstimatorResult:
    """Star-wise contributions (squared) and their global aggregates."""

    EV2: np.ndarray
    EP2: np.ndarray
    EZ2_star: np.ndarray
    EL2_star: np.ndarray
    osc2: np.ndarray
    EZ2_cell: np.ndarray
    EL2_cell: np.ndarray

    @property
    def total2(self):
        return self.EV2 + self.EP2 + self.EZ2_star + self.EL2_star + self.osc2

    def report(self, z):
        return StarReport(int(z), *(float(np.sqrt(v[z])) for v in
                                    (self.EV2, self.EP2, self.EZ2_star, self.EL2_star, self.osc2)))

    def reports(self):
        return [self.report(z) for z in range(len(self.EV2))]

    def element_indicators(self, base):
        return np.sqrt(star_totals(base, self.total2))

    def globals(self):
        """Global values: ``E_V, E_P`` summed over stars, ``E_Z, E_Lambda`` over cells."""
        return {
            "E_V": float(np.sqrt(self.EV2.sum())),
            "E_P": float(np.sqrt(self.EP2.sum())),
            "E_Z": float(np.sqrt(self.EZ2_cell.sum())),
            "E_Lambda": float(np.sqrt(self.EL2_cell.sum())),
            "osc": float(np.sqrt(self.osc2.sum())),
            "total": float(np.sqrt(self.total2.sum())),
        }


def estimate(system, quad, data, jobs=1, interior_stars_only=False):
    """All estimator contributions for the discrete solution ``quad``."""
    base = system.base
    if interior_stars_only:
        stars = base.free_vertices
    else:
        stars = np.arange(base.n_vertices)
    EV2, EP2 = local_indicators(system, quad, data, jobs=jobs, stars=stars)
    EZ2, EL2 = control_contributions(system, quad, data)
    tri_flat = base.triangles.ravel()
    EZs = np.bincount(tri_flat, weights=np.repeat(EZ2, 3), minlength=base.n_vertices)
    ELs = np.bincount(tri_flat, weights=np.repeat(EL2, 3), minlength=base.n_vertices)
    osc = oscillation(base, state_misfit_values(system, quad, data), data.s)
    osc2 = osc ** 2
    if interior_stars_only:
        skip = base.boundary
        EZs, ELs, osc2 = (np.where(skip, 0.0, v) for v in (EZs, ELs, osc2))
    return EstimatorResult(EV2, EP2, EZs, ELs, osc2, EZ2, EL2)
