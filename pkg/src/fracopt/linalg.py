"""Sparse and dense symmetric positive definite solves.

Global tensor-product systems are solved directly by :class:`KroneckerSolver`
(fast diagonalization in ``y``). :func:`cg_solve` (preconditioned conjugate
gradients) and :func:`dense_solve` (Cholesky) serve as general SPD solvers
and as references for the structured paths.
"""

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import DimensionMismatch, NonConvergence, NotPositiveDefinite

DEFAULT_CG_TOL = 1e-10


def _as_matvec(A):
    if sp.issparse(A) or isinstance(A, np.ndarray):
        return lambda x: A @ x
    if hasattr(A, "matvec"):
        return A.matvec
    raise TypeError(f"cannot apply operator of type {type(A).__name__}")


def _diagonal(A):
    if sp.issparse(A):
        return A.diagonal()
    if isinstance(A, np.ndarray):
        return np.diag(A).copy()
    if hasattr(A, "diagonal"):
        return np.asarray(A.diagonal())
    raise TypeError("operator exposes no diagonal; pass a preconditioner")


def jacobi_preconditioner(A):
    """Return ``r -> D^{-1} r`` for the diagonal ``D`` of ``A``."""
    d = _diagonal(A)
    if np.any(d <= 0):
        raise NotPositiveDefinite("Jacobi preconditioner needs a positive diagonal")
    inv = 1.0 / d
    return lambda r: inv * r


def cg_solve(A, b, tol=DEFAULT_CG_TOL, maxit=None, precond=None, x0=None):
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Parameters
    ----------
    A : sparse matrix, ndarray or object with ``matvec``
        The operator. Objects without an explicit matrix must also provide
        ``diagonal()`` unless ``precond`` is given.
    b : ndarray
        Right-hand side.
    tol : float
        Relative residual target, ``||A x - b||_2 <= tol ||b||_2``.
    maxit : int, optional
        Iteration cap, ``10 * len(b)`` by default.
    precond : callable, optional
        Applies an SPD preconditioner to a residual. Jacobi by default.
    x0 : ndarray, optional
        Starting guess.

    Returns
    -------
    x : ndarray

    Raises
    ------
    DimensionMismatch
        ``A`` and ``b`` disagree in size.
    NonConvergence
        ``maxit`` iterations did not reach the tolerance.
    """
    b = np.asarray(b, dtype=float)
    if tol <= 0:
        raise ValueError("tol must be positive")
    shape = getattr(A, "shape", None)
    if shape is not None and (shape[0] != b.shape[0] or shape[1] != b.shape[0]):
        raise DimensionMismatch(f"operator of shape {shape} vs rhs of length {b.shape[0]}")
    n = b.shape[0]
    if maxit is None:
        maxit = 10 * max(n, 1)
    matvec = _as_matvec(A)
    if precond is None:
        precond = jacobi_preconditioner(A)

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    target = tol * bnorm

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x) if x0 is not None else b.copy()
    rnorm = np.linalg.norm(r)
    if rnorm <= target:
        return x
    z = precond(r)
    p = z.copy()
    rz = r @ z
    best_true = np.inf
    stalls = 0
    for it in range(1, maxit + 1):
        Ap = matvec(p)
        pAp = p @ Ap
        if pAp <= 0:
            raise NotPositiveDefinite("non-positive curvature met in CG")
        step = rz / pAp
        x += step * p
        r -= step * Ap
        rnorm = np.linalg.norm(r)
        if rnorm <= target:
            # guard against drift of the recursive residual
            r_true = b - matvec(x)
            rnorm = np.linalg.norm(r_true)
            if rnorm <= target:
                return x
            # the recursive residual has hit the rounding floor of the operator
            stalls = stalls + 1 if rnorm >= 0.5 * best_true else 0
            best_true = min(best_true, rnorm)
            if stalls >= 3:
                raise NonConvergence(
                    f"CG stagnated at relative residual {rnorm / bnorm:.3e} after {it} iterations",
                    iterations=it, residual=rnorm / bnorm)
            r = r_true
        z = precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NonConvergence(
        f"CG stopped after {maxit} iterations at relative residual {rnorm / bnorm:.3e}",
        iterations=maxit,
        residual=rnorm / bnorm,
    )


def dense_solve(A, b):
    """Cholesky solve of a small dense SPD system.

    Raises :class:`NotPositiveDefinite` when the factorization meets a
    non-positive pivot.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"matrix {A.shape} vs rhs {b.shape}")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return scipy.linalg.cho_solve(factor, b, check_finite=False)


def is_symmetric(A, rtol=1e-12):
    """Entrywise symmetry within ``rtol`` relative to the largest entry."""
    if sp.issparse(A):
        D = (A - A.T).tocoo()
        scale = abs(A).max() if A.nnz else 0.0
        return D.nnz == 0 or np.max(np.abs(D.data), initial=0.0) <= rtol * scale
    A = np.asarray(A)
    scale = np.max(np.abs(A), initial=0.0)
    return np.max(np.abs(A - A.T), initial=0.0) <= rtol * scale


class KroneckerSolver:
    """Direct solver for ``(K2 (x) My + M2 (x) Ky) / scale`` by diagonalizing the 1D pair.

    With ``Ky = L L^T`` and ``L^{-1} My L^{-T} = Q diag(c) Q^T`` the matrix
    ``Vy = L^{-T} Q`` satisfies ``Vy^T Ky Vy = I`` and ``Vy^T My Vy = diag(c)``,
    so the system splits into ``M`` sparse 2D systems ``c_j K2 + M2``. Factoring
    the stiffness side keeps the decomposition backward stable on strongly
    graded 1D meshes, where ``My`` is badly scaled.

    Used as the direct solver of the global state and adjoint systems; it can
    also precondition :func:`cg_solve`.
    """

    def __init__(self, K2, M2, Ky, My, scale=1.0):
        import scipy.sparse.linalg as spla

        Kyd = Ky.toarray() if sp.issparse(Ky) else np.asarray(Ky, dtype=float)
        Myd = My.toarray() if sp.issparse(My) else np.asarray(My, dtype=float)
        try:
            L = scipy.linalg.cholesky(Kyd, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
        W = scipy.linalg.solve_triangular(L, Myd, lower=True)
        C = scipy.linalg.solve_triangular(L, W.T, lower=True)
        C = 0.5 * (C + C.T)
        c, Q = scipy.linalg.eigh(C)
        self.c = np.maximum(c, 0.0)
        self.Vy = scipy.linalg.solve_triangular(L.T, Q, lower=False)
        self.scale = float(scale)
        K2 = sp.csc_matrix(K2)
        M2 = sp.csc_matrix(M2)
        self.n2 = K2.shape[0]
        self.m = Kyd.shape[0]
        self.shape = (self.n2 * self.m, self.n2 * self.m)
        self._factors = [spla.splu((cj * K2 + M2).tocsc()) for cj in self.c] if self.n2 else []

    def solve_modes(self, F):
        """Solve ``(c_j K2 + M2) x_j = F[:, j]`` for every mode ``j``."""
        out = np.empty_like(F)
        for j, lu in enumerate(self._factors):
            out[:, j] = lu.solve(F[:, j])
        return out

    def solve_grid(self, B):
        """Solve for an ``(n2, m)`` right-hand side grid; returns the solution grid."""
        if self.n2 == 0:
            return np.zeros_like(B)
        Xh = self.solve_modes(self.scale * (B @ self.Vy))
        return Xh @ self.Vy.T

    def solve(self, b):
        return self.solve_grid(np.asarray(b, dtype=float).reshape(self.n2, self.m)).ravel()

    __call__ = solve

    def trace_solve(self, f):
        """Level-0 values of the solution whose load is ``f`` on level 0 only."""
        if self.n2 == 0:
            return np.zeros_like(f)
        v0 = self.Vy[0]
        Xh = self.solve_modes(np.outer(f, self.scale * v0))
        return Xh @ v0

    def lift_solve(self, f):
        """Full solution grid for a load ``f`` on level 0 only."""
        if self.n2 == 0:
            return np.zeros((len(f), self.m))
        v0 = self.Vy[0]
        Xh = self.solve_modes(np.outer(f, self.scale * v0))
        return Xh @ self.Vy.T
