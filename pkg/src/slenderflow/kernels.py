"""Free-space Stokes fundamental solutions and their pairwise summations.

Sign conventions are fixed here once: every kernel takes the raw displacement
r = target - source.  The batched summation routines run the source loop
serially inside a parallel loop over targets, so results are bitwise
independent of the worker count.
"""

import numpy as np
from numba import njit, prange

MIN_SEPARATION = 1e-12


class SingularEvaluationError(ValueError):
    pass


class NearFieldError(ValueError):
    """Target lies inside a near shell and needs nearly singular treatment."""


class KernelContext:
    """Holds the fluid viscosity shared by all kernel evaluations."""

    def __init__(self, mu):
        if mu <= 0:
            raise ValueError(f"viscosity must be positive, got {mu}")
        self.mu = float(mu)


def _checked_r(r):
    r = np.asarray(r, dtype=float)
    d = np.sqrt(r @ r)
    if d < MIN_SEPARATION:
        raise SingularEvaluationError(f"evaluation point within {MIN_SEPARATION} of source")
    return r, d


def stokeslet_apply(r, f, mu):
    """Velocity of a point force: (1/8 pi mu) (I + rhat rhat) . f / |r|."""
    r, d = _checked_r(r)
    f = np.asarray(f, dtype=float)
    return (f / d + (r @ f) * r / d**3) / (8.0 * np.pi * mu)


def stresslet_apply(r, n, q, mu):
    """Double-layer kernel contraction: -(3/4 pi mu) (q.rhat)(n.rhat) rhat / |r|^2."""
    r, d = _checked_r(r)
    n = np.asarray(n, dtype=float)
    q = np.asarray(q, dtype=float)
    return -3.0 * (q @ r) * (n @ r) * r / (4.0 * np.pi * mu * d**5)


def rotlet_apply(r, L, mu):
    """Velocity of a point torque: (1/8 pi mu) (L x rhat) / |r|^2."""
    r, d = _checked_r(r)
    L = np.asarray(L, dtype=float)
    return np.cross(L, r) / (8.0 * np.pi * mu * d**3)


def doublet_apply(r, f, mu):
    """Source-doublet velocity: (1/8 pi mu) (I - 3 rhat rhat) . f / |r|^3."""
    r, d = _checked_r(r)
    f = np.asarray(f, dtype=float)
    return (f / d**3 - 3.0 * (r @ f) * r / d**5) / (8.0 * np.pi * mu)


_MINSEP2 = MIN_SEPARATION * MIN_SEPARATION


@njit(parallel=True, fastmath=False, cache=True)
def stokeslet_sum(trg, tgrp, src, sgrp, f, pref):
    """Sum of Stokeslets at targets, skipping sources in the target's group.

    Input:
        trg: (Nt, 3) targets, tgrp: (Nt,) int group ids (-1 = no exclusion)
        src: (Ns, 3) sources, sgrp: (Ns,) int group ids
        f: (Ns, 3) strengths (quadrature weights folded in)
        pref: scalar 1/(8 pi mu)
    Output: (Nt, 3) velocities and the count of below-minimum separations hit.
    """
    nt = trg.shape[0]
    ns = src.shape[0]
    out = np.zeros((nt, 3))
    bad = 0
    for i in prange(nt):
        gx = tgrp[i]
        ux = 0.0
        uy = 0.0
        uz = 0.0
        for j in range(ns):
            if gx >= 0 and sgrp[j] == gx:
                continue
            rx = trg[i, 0] - src[j, 0]
            ry = trg[i, 1] - src[j, 1]
            rz = trg[i, 2] - src[j, 2]
            r2 = rx * rx + ry * ry + rz * rz
            if r2 < _MINSEP2:
                bad += 1
                continue
            ir = 1.0 / np.sqrt(r2)
            ir3 = ir / r2
            rf = rx * f[j, 0] + ry * f[j, 1] + rz * f[j, 2]
            ux += f[j, 0] * ir + rf * rx * ir3
            uy += f[j, 1] * ir + rf * ry * ir3
            uz += f[j, 2] * ir + rf * rz * ir3
        out[i, 0] = pref * ux
        out[i, 1] = pref * uy
        out[i, 2] = pref * uz
    return out, bad


@njit(parallel=True, fastmath=False, cache=True)
def doublet_sum(trg, tgrp, src, sgrp, f, pref):
    """Sum of source doublets; same conventions as stokeslet_sum."""
    nt = trg.shape[0]
    ns = src.shape[0]
    out = np.zeros((nt, 3))
    bad = 0
    for i in prange(nt):
        gx = tgrp[i]
        ux = 0.0
        uy = 0.0
        uz = 0.0
        for j in range(ns):
            if gx >= 0 and sgrp[j] == gx:
                continue
            rx = trg[i, 0] - src[j, 0]
            ry = trg[i, 1] - src[j, 1]
            rz = trg[i, 2] - src[j, 2]
            r2 = rx * rx + ry * ry + rz * rz
            if r2 < _MINSEP2:
                bad += 1
                continue
            ir3 = 1.0 / (r2 * np.sqrt(r2))
            ir5 = ir3 / r2
            rf = rx * f[j, 0] + ry * f[j, 1] + rz * f[j, 2]
            ux += f[j, 0] * ir3 - 3.0 * rf * rx * ir5
            uy += f[j, 1] * ir3 - 3.0 * rf * ry * ir5
            uz += f[j, 2] * ir3 - 3.0 * rf * rz * ir5
        out[i, 0] = pref * ux
        out[i, 1] = pref * uy
        out[i, 2] = pref * uz
    return out, bad


@njit(parallel=True, fastmath=False, cache=True)
def rotlet_sum(trg, src, L, pref):
    """Sum of rotlets (no group exclusion; sources are body centers)."""
    nt = trg.shape[0]
    ns = src.shape[0]
    out = np.zeros((nt, 3))
    bad = 0
    for i in prange(nt):
        ux = 0.0
        uy = 0.0
        uz = 0.0
        for j in range(ns):
            rx = trg[i, 0] - src[j, 0]
            ry = trg[i, 1] - src[j, 1]
            rz = trg[i, 2] - src[j, 2]
            r2 = rx * rx + ry * ry + rz * rz
            if r2 < _MINSEP2:
                bad += 1
                continue
            ir3 = 1.0 / (r2 * np.sqrt(r2))
            ux += (L[j, 1] * rz - L[j, 2] * ry) * ir3
            uy += (L[j, 2] * rx - L[j, 0] * rz) * ir3
            uz += (L[j, 0] * ry - L[j, 1] * rx) * ir3
        out[i, 0] = pref * ux
        out[i, 1] = pref * uy
        out[i, 2] = pref * uz
    return out, bad


@njit(parallel=True, fastmath=False, cache=True)
def stresslet_sum(trg, tgrp, src, sgrp, nrm, qw, pref):
    """Double-layer quadrature sum at off-surface targets.

    qw carries the density with quadrature weight and Jacobian folded in;
    pref is -3/(4 pi mu).
    """
    nt = trg.shape[0]
    ns = src.shape[0]
    out = np.zeros((nt, 3))
    bad = 0
    for i in prange(nt):
        gx = tgrp[i]
        ux = 0.0
        uy = 0.0
        uz = 0.0
        for j in range(ns):
            if gx >= 0 and sgrp[j] == gx:
                continue
            rx = trg[i, 0] - src[j, 0]
            ry = trg[i, 1] - src[j, 1]
            rz = trg[i, 2] - src[j, 2]
            r2 = rx * rx + ry * ry + rz * rz
            if r2 < _MINSEP2:
                bad += 1
                continue
            ir5 = 1.0 / (r2 * r2 * np.sqrt(r2))
            qr = qw[j, 0] * rx + qw[j, 1] * ry + qw[j, 2] * rz
            nr = nrm[j, 0] * rx + nrm[j, 1] * ry + nrm[j, 2] * rz
            c = qr * nr * ir5
            ux += c * rx
            uy += c * ry
            uz += c * rz
        out[i, 0] = pref * ux
        out[i, 1] = pref * uy
        out[i, 2] = pref * uz
    return out, bad


@njit(parallel=True, fastmath=False, cache=True)
def stresslet_sum_subtracted(nodes, nrm, w, q, pref):
    """On-surface singularity-subtracted double layer.

    Computes sum_{j != i} w_j n_j.T(x_i - y_j).(q_j - q_i), which is the
    exterior limit of the layer potential (constants map to zero exactly).
    """
    n = nodes.shape[0]
    out = np.zeros((n, 3))
    for i in prange(n):
        ux = 0.0
        uy = 0.0
        uz = 0.0
        for j in range(n):
            if j == i:
                continue
            rx = nodes[i, 0] - nodes[j, 0]
            ry = nodes[i, 1] - nodes[j, 1]
            rz = nodes[i, 2] - nodes[j, 2]
            r2 = rx * rx + ry * ry + rz * rz
            ir5 = 1.0 / (r2 * r2 * np.sqrt(r2))
            dqx = q[j, 0] - q[i, 0]
            dqy = q[j, 1] - q[i, 1]
            dqz = q[j, 2] - q[i, 2]
            qr = dqx * rx + dqy * ry + dqz * rz
            nr = nrm[j, 0] * rx + nrm[j, 1] * ry + nrm[j, 2] * rz
            c = w[j] * qr * nr * ir5
            ux += c * rx
            uy += c * ry
            uz += c * rz
        out[i, 0] = pref * ux
        out[i, 1] = pref * uy
        out[i, 2] = pref * uz
    return out


@njit(parallel=True, fastmath=False, cache=True)
def stresslet_rowsum(nodes, nrm, w, pref):
    """Per-node row sums sum_{j != i} w_j n_j.T(x_i - y_j) as (N, 3, 3) blocks.

    Used for the diagonal of surface self-blocks (preconditioning) and for
    subtracted evaluation at arbitrary on-surface points.
    """
    n = nodes.shape[0]
    out = np.zeros((n, 3, 3))
    for i in prange(n):
        for j in range(n):
            if j == i:
                continue
            rx = nodes[i, 0] - nodes[j, 0]
            ry = nodes[i, 1] - nodes[j, 1]
            rz = nodes[i, 2] - nodes[j, 2]
            r2 = rx * rx + ry * ry + rz * rz
            ir5 = 1.0 / (r2 * r2 * np.sqrt(r2))
            nr = nrm[j, 0] * rx + nrm[j, 1] * ry + nrm[j, 2] * rz
            c = pref * w[j] * nr * ir5
            out[i, 0, 0] += c * rx * rx
            out[i, 0, 1] += c * rx * ry
            out[i, 0, 2] += c * rx * rz
            out[i, 1, 0] += c * ry * rx
            out[i, 1, 1] += c * ry * ry
            out[i, 1, 2] += c * ry * rz
            out[i, 2, 0] += c * rz * rx
            out[i, 2, 1] += c * rz * ry
            out[i, 2, 2] += c * rz * rz
    return out


@njit(cache=True)
def kdelta_matrix(X, s, s_alpha, tang, w, delta, pref):
    """Dense matrix of the regularized non-local self-mobility of one fiber.

    Builds K such that (K @ f.ravel()).reshape(-1, 3) approximates
    integral of (|r|/sqrt(|r|^2+d^2)) G(r) f(s') minus the local subtraction
    (I + t t) f(s) / (8 pi mu sqrt(|s-s'|^2+d^2)) over the centerline.
    The integrand vanishes at the diagonal, so the j == i entry drops out.
    pref = 1/(8 pi mu).
    """
    n = X.shape[0]
    K = np.zeros((3 * n, 3 * n))
    d2 = delta * delta
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            rx = X[i, 0] - X[j, 0]
            ry = X[i, 1] - X[j, 1]
            rz = X[i, 2] - X[j, 2]
            r2 = rx * rx + ry * ry + rz * rz
            reg = 1.0 / np.sqrt(r2 + d2)
            cw = w[j] * s_alpha[j] * pref
            # (|r| / sqrt(r^2+d^2)) * (I + rhat rhat)/|r| = (I + rhat rhat) * reg
            a = cw * reg
            b = cw * reg / r2
            K[3 * i + 0, 3 * j + 0] += a + b * rx * rx
            K[3 * i + 0, 3 * j + 1] += b * rx * ry
            K[3 * i + 0, 3 * j + 2] += b * rx * rz
            K[3 * i + 1, 3 * j + 0] += b * ry * rx
            K[3 * i + 1, 3 * j + 1] += a + b * ry * ry
            K[3 * i + 1, 3 * j + 2] += b * ry * rz
            K[3 * i + 2, 3 * j + 0] += b * rz * rx
            K[3 * i + 2, 3 * j + 1] += b * rz * ry
            K[3 * i + 2, 3 * j + 2] += a + b * rz * rz
            # subtraction term acts on f at the target node i
            ds = s[i] - s[j]
            sub = cw / np.sqrt(ds * ds + d2)
            tx = tang[i, 0]
            ty = tang[i, 1]
            tz = tang[i, 2]
            K[3 * i + 0, 3 * i + 0] -= sub * (1.0 + tx * tx)
            K[3 * i + 0, 3 * i + 1] -= sub * tx * ty
            K[3 * i + 0, 3 * i + 2] -= sub * tx * tz
            K[3 * i + 1, 3 * i + 0] -= sub * ty * tx
            K[3 * i + 1, 3 * i + 1] -= sub * (1.0 + ty * ty)
            K[3 * i + 1, 3 * i + 2] -= sub * ty * tz
            K[3 * i + 2, 3 * i + 0] -= sub * tz * tx
            K[3 * i + 2, 3 * i + 1] -= sub * tz * ty
            K[3 * i + 2, 3 * i + 2] -= sub * (1.0 + tz * tz)
    return K


def no_groups(n):
    """Group-id array disabling exclusion for n points."""
    return np.full(n, -1, dtype=np.int64)
