"""Eigen-series reference solutions of the spectral fractional Laplacian on rectangles."""

import math

import numpy as np
from scipy.special import roots_legendre

DEFAULT_KMAX = 64


def ds_constant(s):
    """``d_s = 2**(1 - 2s) * Gamma(1 - s) / Gamma(s)``."""
    if not 0.0 < s < 1.0:
        raise ValueError(f"s must lie in (0, 1), got {s}")
    return 2.0 ** (1.0 - 2.0 * s) * math.exp(math.lgamma(1.0 - s) - math.lgamma(s))


class RectangleEigenbasis:
    """Dirichlet eigenpairs of ``-Laplace`` on ``(0, L1) x (0, L2)``.

    Modes are indexed ``(k, l)`` with ``1 <= k, l <= kmax``; coefficient
    arrays have shape ``(kmax, kmax)``.
    """

    def __init__(self, L1=1.0, L2=1.0, kmax=DEFAULT_KMAX, origin=(0.0, 0.0)):
        self.L1, self.L2 = float(L1), float(L2)
        self.kmax = int(kmax)
        self.origin = np.asarray(origin, dtype=float)
        k = np.arange(1, self.kmax + 1)
        self.eigenvalues = np.pi ** 2 * (k[:, None] ** 2 / self.L1 ** 2 + k[None, :] ** 2 / self.L2 ** 2)

    def flat_eigenvalues(self):
        return np.sort(self.eigenvalues.ravel())

    def _sines(self, x1, x2):
        k = np.arange(1, self.kmax + 1)
        s1 = np.sin(np.pi * np.multiply.outer(np.asarray(x1) - self.origin[0], k) / self.L1)
        s2 = np.sin(np.pi * np.multiply.outer(np.asarray(x2) - self.origin[1], k) / self.L2)
        return s1, s2

    def mode(self, k, l):
        """The normalized eigenfunction ``phi_{k,l}`` as a callable of ``(x1, x2)``."""
        c = 2.0 / math.sqrt(self.L1 * self.L2)

        def phi(x1, x2):
            return c * (np.sin(k * np.pi * (np.asarray(x1) - self.origin[0]) / self.L1)
                        * np.sin(l * np.pi * (np.asarray(x2) - self.origin[1]) / self.L2))
        return phi

    def evaluate(self, coeffs, x1, x2):
        """``sum_{k,l} c_{k,l} phi_{k,l}(x)`` at points of any common shape."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        shape = np.broadcast(x1, x2).shape
        s1, s2 = self._sines(np.broadcast_to(x1, shape).ravel(), np.broadcast_to(x2, shape).ravel())
        c = 2.0 / math.sqrt(self.L1 * self.L2)
        vals = c * np.einsum("pk,kl,pl->p", s1, coeffs, s2)
        return vals.reshape(shape)


def fractional_solve(basis, z, s):
    """Coefficients ``u_{k,l} = lambda_{k,l}**(-s) z_{k,l}`` of ``(-Laplace)^s u = z``."""
    return np.asarray(z, dtype=float) * basis.eigenvalues ** (-s)


def project_to_basis(f, basis, degree=None):
    """``(f, phi_{k,l})`` by tensor Gauss-Legendre quadrature.

    The rectangle is split into ``2 * kmax`` panels per direction with
    ``degree`` points each (8 by default); for smooth ``f`` this resolves
    every retained mode to about 1e-8 or better.
    """
    n = 8 if degree is None else int(degree)
    panels = 2 * basis.kmax
    x, w = roots_legendre(n)
    t = (0.5 * (x + 1.0))[None, :] + np.arange(panels)[:, None]
    t = (t / panels).ravel()
    wt = np.tile(0.5 * w, panels) / panels
    x1 = basis.origin[0] + basis.L1 * t
    x2 = basis.origin[1] + basis.L2 * t
    w1 = basis.L1 * wt
    w2 = basis.L2 * wt
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    F = np.asarray(f(X1, X2), dtype=float) * np.ones_like(X1)
    s1, s2 = basis._sines(x1, x2)
    c = 2.0 / math.sqrt(basis.L1 * basis.L2)
    return c * (w1[:, None] * s1).T @ F @ (w2[:, None] * s2)
