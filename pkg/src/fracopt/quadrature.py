"""Quadrature on the reference triangle and on intervals."""

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .errors import UnsupportedDegree

SUPPORTED_DEGREES = (4, 7)


@lru_cache(maxsize=None)
def _conical_rule(degree):
    # Stroud conical product: Gauss-Jacobi (weight 1 - t) times Gauss-Legendre,
    # positive weights, exact for total degree 2n - 1.
    n = (degree + 2) // 2
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    t = 0.5 * (xj + 1.0)
    wt = 0.25 * wj
    xl, wl = roots_legendre(n)
    u = 0.5 * (xl + 1.0)
    wu = 0.5 * wl
    T, U = np.meshgrid(t, u, indexing="ij")
    points = np.stack([T.ravel(), ((1.0 - T) * U).ravel()], axis=1)
    weights = np.outer(wt, wu).ravel()
    points.setflags(write=False)
    weights.setflags(write=False)
    return points, weights


def gauss_rule(degree):
    """Positive-weight rule on the triangle (0,0), (1,0), (0,1).

    Returns ``(points, weights)``; weights sum to the area 1/2.
    """
    if degree not in SUPPORTED_DEGREES:
        raise UnsupportedDegree(f"no triangle rule of degree {degree}; use one of {SUPPORTED_DEGREES}")
    return _conical_rule(degree)


def barycentric(points):
    """Barycentric coordinates ``(l0, l1, l2)`` of reference points."""
    points = np.asarray(points)
    return np.stack([1.0 - points[:, 0] - points[:, 1], points[:, 0], points[:, 1]], axis=1)


def map_points(vertices, ref_points):
    """Physical quadrature points, shape ``(T, Q, 2)``, for ``(T, 3, 2)`` vertices."""
    lam = barycentric(ref_points)
    return np.einsum("qi,tid->tqd", lam, vertices)


@lru_cache(maxsize=None)
def legendre01(n):
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w
