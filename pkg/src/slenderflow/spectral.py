"""Chebyshev pseudo-spectral machinery for fiber centerlines.

Nodes, coefficient transforms, differentiation, Clenshaw-Curtis integration,
barycentric interpolation, and the map between the reference coordinate
alpha in [-1, 1] and arclength s in [0, L].

Orientation convention used everywhere in this package: alpha_0 = +1 is the
plus end (s = L) and alpha_p = -1 is the minus end (s = 0).
"""

import numpy as np
from numpy.polynomial import chebyshev as ncheb
from scipy.fft import dct


class InvalidOrderError(ValueError):
    pass


class DegenerateFiberError(ValueError):
    pass


def cheb_nodes(p):
    """Chebyshev extremal points cos(k*pi/p), k = 0..p, ordered +1 down to -1.

    Symmetrized so that the node set is exactly antisymmetric (the midpoint
    of an even-order grid is exactly zero).
    """
    if int(p) != p or p < 1:
        raise InvalidOrderError(f"order must be an integer >= 1, got {p}")
    p = int(p)
    a = np.cos(np.arange(p + 1) * np.pi / p)
    return 0.5 * (a - a[::-1])


def cheb_transform(values):
    """Chebyshev coefficients c_k of the interpolant through nodal values.

    values are samples at cos(k*pi/p); the expansion sum_k c_k T_k(alpha)
    reproduces them to rounding.  Uses a type-I DCT.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size < 2:
        raise ValueError("expected a 1-d array of at least two nodal values")
    p = values.size - 1
    c = dct(values, type=1) / p
    c[0] *= 0.5
    c[-1] *= 0.5
    return c


def cheb_eval_nodes(coeffs, nodes):
    """Evaluate a Chebyshev series at the given points (Clenshaw recurrence)."""
    return ncheb.chebval(nodes, coeffs)


def cheb_diff(values, grid):
    """Nodal values of d/d(alpha) of the degree-p interpolant.

    Differentiation happens in coefficient space (exact recursion), then the
    derivative series is evaluated back at the nodes.
    """
    values = np.asarray(values, dtype=float)
    if values.size != grid.p + 1:
        raise ValueError(f"expected {grid.p + 1} nodal values, got {values.size}")
    dc = ncheb.chebder(cheb_transform(values))
    return ncheb.chebval(grid.nodes, dc)


def cheb_integrate(values, grid):
    """Integral over [-1, 1] of the interpolant (Clenshaw-Curtis)."""
    values = np.asarray(values, dtype=float)
    if values.size != grid.p + 1:
        raise ValueError(f"expected {grid.p + 1} nodal values, got {values.size}")
    return float(grid.weights @ values)


def cheb_interp(values, alpha):
    """Stable barycentric evaluation of the interpolant at alpha in [-1, 1]."""
    values = np.asarray(values, dtype=float)
    p = values.size - 1
    if abs(alpha) > 1.0 + 1e-12:
        raise ValueError(f"interpolation point {alpha} outside [-1, 1]")
    alpha = min(1.0, max(-1.0, float(alpha)))
    nodes = cheb_nodes(p)
    d = alpha - nodes
    hit = np.nonzero(np.abs(d) < 1e-15)[0]
    if hit.size:
        return float(values[hit[0]])
    w = np.ones(p + 1)
    w[1::2] = -1.0
    w[0] *= 0.5
    w[-1] *= 0.5
    t = w / d
    return float((t @ values) / t.sum())


def _cc_weights(p):
    # Exact moments of the Chebyshev basis pushed through the inverse of the
    # nodal->coefficient map: w_j = sum_k mu_k C_kj with mu_k = int T_k.
    k = np.arange(p + 1)
    mu = np.zeros(p + 1)
    even = k % 2 == 0
    mu[even] = 2.0 / (1.0 - k[even].astype(float) ** 2)
    C = np.empty((p + 1, p + 1))
    for j in range(p + 1):
        e = np.zeros(p + 1)
        e[j] = 1.0
        C[:, j] = cheb_transform(e)
    return mu @ C


class ChebyshevGrid:
    """Collocation grid of order p: nodes, quadrature weights, dense D_alpha.

    The dense differentiation operator is materialized once (column by column
    through the coefficient recursion) for use in operator assembly; it is
    exact for polynomials of degree <= p up to rounding.
    """

    def __init__(self, p):
        if int(p) != p or p < 4:
            raise InvalidOrderError(f"grid order must be an integer >= 4, got {p}")
        self.p = int(p)
        self.nodes = cheb_nodes(self.p)
        self.weights = _cc_weights(self.p)
        D = np.empty((self.p + 1, self.p + 1))
        for j in range(self.p + 1):
            e = np.zeros(self.p + 1)
            e[j] = 1.0
            D[:, j] = cheb_diff(e, self)
        self.D = D

    def __repr__(self):
        return f"ChebyshevGrid(p={self.p})"


def arclength_map(X, grid):
    """Arclength data of a nodal centerline X with shape (p+1, 3).

    Returns (s at nodes, s_alpha at nodes, L) where
    s(alpha) = integral_{-1}^{alpha} |X_alpha'| d(alpha') and L = s(+1).
    """
    X = np.asarray(X, dtype=float)
    if X.shape != (grid.p + 1, 3):
        raise ValueError(f"expected centerline of shape ({grid.p + 1}, 3)")
    Xa = grid.D @ X
    s_alpha = np.sqrt((Xa * Xa).sum(axis=1))
    if s_alpha.min() <= 1e-12:
        raise DegenerateFiberError("centerline parametrization is degenerate")
    anti = ncheb.chebint(cheb_transform(s_alpha))
    s = ncheb.chebval(grid.nodes, anti) - ncheb.chebval(-1.0, anti)
    return s, s_alpha, float(s[0])
