"""Fiber state and mechanics.

A fiber is an inextensible Euler-Bernoulli filament discretized on a
Chebyshev grid: elastic force density, slender-body self-mobility (local
anisotropic drag plus the regularized non-local integral), induced flow at
distant targets, boundary-condition residuals, and (de)polymerization
kinetics with dynamic instability.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as ncheb

from . import kernels
from .spectral import ChebyshevGrid, arclength_map, cheb_transform

GROWING = "growing"
SHRINKING = "shrinking"
STALLED = "stalled"

_GRIDS = {}


def shared_grid(p):
    if p not in _GRIDS:
        _GRIDS[p] = ChebyshevGrid(p)
    return _GRIDS[p]


NearFieldError = kernels.NearFieldError


class InsideFiberError(ValueError):
    pass


@dataclass
class GrowthKinetics:
    """Dynamic-instability parameters (microtubule defaults, pN-um-s units)."""

    v_grow: float = 0.12
    v_shrink: float = 0.288
    f_cat: float = 0.014
    f_res: float = 0.014
    stall_force: float = 4.4
    min_length: float = 0.5


class FreeEnd:
    kind = "free"

    def __repr__(self):
        return "FreeEnd()"


class PrescribedForceTorque:
    kind = "prescribedForceTorque"

    def __init__(self, force, torque=(0.0, 0.0, 0.0)):
        self.force = np.asarray(force, dtype=float)
        self.torque = np.asarray(torque, dtype=float)


class HingedToSurface:
    """Spring attachment of a fiber end to a fixed point, torque-free."""

    kind = "hingedToSurface"

    def __init__(self, attachment, stiffness):
        if stiffness < 0:
            raise ValueError("spring constant must be nonnegative")
        self.attachment = np.asarray(attachment, dtype=float)
        self.stiffness = float(stiffness)


class ClampedToBody:
    """Attachment to a rigid body; tangent=None leaves the end hinged."""

    kind = "clampedToBody"

    def __init__(self, body, attach_point, tangent=None):
        self.body = int(body)
        self.attach_point = np.asarray(attach_point, dtype=float)
        if tangent is None:
            self.tangent = None
        else:
            t = np.asarray(tangent, dtype=float)
            nt = np.linalg.norm(t)
            if not np.isclose(nt, 1.0, atol=1e-8):
                raise ValueError("clamped tangent must be a unit vector")
            self.tangent = t / nt


class Fiber:
    """Chebyshev-collocated centerline with tension and growth state.

    Node 0 sits at alpha = +1 (the plus end, s = L); node p at alpha = -1
    (the minus end, s = 0).  Geometry-derived quantities (arclength map,
    tangents, arclength differentiation matrices) are cached and refreshed
    whenever the centerline moves.
    """

    def __init__(self, X, eps, E, delta=None, bc_minus=None, bc_plus=None,
                 tension=None, growth_state=STALLED, Ldot=0.0, rng=None,
                 kinetics=None, tau_cat=math.inf):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 3 or X.shape[0] < 5:
            raise ValueError("centerline must be (p+1, 3) with p >= 4")
        if not 0.0 < eps <= 0.1:
            raise ValueError(f"aspect ratio must lie in (0, 0.1], got {eps}")
        if E <= 0:
            raise ValueError("flexural modulus must be positive")
        self.grid = shared_grid(X.shape[0] - 1)
        self.X = X.copy()
        self.T = np.zeros(X.shape[0]) if tension is None else np.asarray(tension, dtype=float).copy()
        self.eps = float(eps)
        self.E = float(E)
        self.growth_state = growth_state
        self.Ldot = float(Ldot)
        self.bc_minus = bc_minus if bc_minus is not None else FreeEnd()
        self.bc_plus = bc_plus if bc_plus is not None else FreeEnd()
        self.rng = rng
        self.kinetics = kinetics if kinetics is not None else GrowthKinetics()
        self.tau_cat = tau_cat
        self._delta_ratio = None if delta is not None else 0.01
        self._delta = float(delta) if delta is not None else 0.0
        self.refresh_geometry()

    # -- geometry ---------------------------------------------------------

    def refresh_geometry(self):
        s, s_alpha, L = arclength_map(self.X, self.grid)
        self.s = s
        self.s_alpha = s_alpha
        self.L = L
        Xa = self.grid.D @ self.X
        self.tangents = Xa / s_alpha[:, None]
        self.Ds = self.grid.D / s_alpha[:, None]
        self.Ds2 = self.Ds @ self.Ds
        self.Ds3 = self.Ds2 @ self.Ds
        self.Ds4 = self.Ds2 @ self.Ds2
        if self._delta_ratio is not None:
            self._delta = self._delta_ratio * L
        self._kdelta_cache = {}
        self._mobility_cache = {}

    @property
    def n_nodes(self):
        return self.grid.p + 1

    @property
    def p(self):
        return self.grid.p

    @property
    def delta(self):
        return self._delta

    @delta.setter
    def delta(self, value):
        if value <= 0:
            raise ValueError("regularization length must be positive")
        self._delta = float(value)
        self._delta_ratio = None
        self._kdelta_cache = {}

    def end_index(self, plus):
        return 0 if plus else self.grid.p

    def node_weights(self):
        """Quadrature weights converting force density to point strengths (ds)."""
        return self.grid.weights * self.s_alpha

    def copy_state(self):
        return dict(X=self.X.copy(), T=self.T.copy(), L=self.L, Ldot=self.Ldot,
                    growth_state=self.growth_state, tau_cat=self.tau_cat)

    # -- dense operators used by the implicit solver -----------------------

    def elastic_operators(self):
        """(FX, FT) with f.ravel() = FX @ X.ravel() + FT @ T.

        FX is 3n x 3n acting per component; FT is 3n x n from the
        tension-gradient term with frozen tangents.
        """
        n = self.n_nodes
        FXc = -self.E * self.Ds4
        FX = np.zeros((3 * n, 3 * n))
        FT = np.zeros((3 * n, n))
        for c in range(3):
            FX[c::3, c::3] = FXc
            FT[c::3, :] = self.Ds @ np.diag(self.tangents[:, c])
        return FX, FT

    def mobility_matrix(self, mu):
        """Dense 3n x 3n local mobility (block diagonal over nodes)."""
        if mu in self._mobility_cache:
            return self._mobility_cache[mu]
        n = self.n_nodes
        c_log = -math.log(self.eps**2 * math.e) / (8.0 * np.pi * mu)
        c_two = 2.0 / (8.0 * np.pi * mu)
        M = np.zeros((3 * n, 3 * n))
        eye = np.eye(3)
        for k in range(n):
            t = self.tangents[k]
            tt = np.outer(t, t)
            M[3 * k:3 * k + 3, 3 * k:3 * k + 3] = c_log * (eye + tt) + c_two * (eye - tt)
        self._mobility_cache[mu] = M
        return M

    def kdelta_matrix(self, mu):
        """Dense 3n x 3n regularized non-local self-mobility."""
        if mu in self._kdelta_cache:
            return self._kdelta_cache[mu]
        K = kernels.kdelta_matrix(
            self.X, self.s, self.s_alpha, self.tangents, self.grid.weights,
            self.delta, 1.0 / (8.0 * np.pi * mu),
        )
        self._kdelta_cache[mu] = K
        return K


def straight_fiber(p, start, direction, length, eps=0.01, E=10.0, **kwargs):
    """Straight fiber from start along a unit direction; minus end at start."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    grid = shared_grid(p)
    s = (grid.nodes + 1.0) * (length / 2.0)
    X = np.asarray(start, dtype=float)[None, :] + s[:, None] * d[None, :]
    return Fiber(X, eps=eps, E=E, **kwargs)


# -- force and mobility operations ----------------------------------------

def elastic_force_density(fib, Xcand, Tcand):
    """f = -E d^4X/ds^4 + d(T Xs)/ds with geometric factors frozen."""
    Xcand = np.asarray(Xcand, dtype=float)
    Tcand = np.asarray(Tcand, dtype=float)
    return -fib.E * (fib.Ds4 @ Xcand) + fib.Ds @ (Tcand[:, None] * fib.tangents)


def local_mobility_apply(fib, f, mu):
    """Anisotropic local drag: (1/8 pi mu)[-ln(eps^2 e)(I+tt) + 2(I-tt)].f."""
    f = np.asarray(f, dtype=float)
    c_log = -math.log(fib.eps**2 * math.e) / (8.0 * np.pi * mu)
    c_two = 2.0 / (8.0 * np.pi * mu)
    ft = (f * fib.tangents).sum(axis=1)[:, None] * fib.tangents
    return c_log * (f + ft) + c_two * (f - ft)


def nonlocal_Kdelta_apply(fib, f, mu):
    """Regularized finite-part self-interaction along the centerline."""
    if fib.delta <= 0:
        raise ValueError("regularization length must be positive")
    f = np.asarray(f, dtype=float)
    return (fib.kdelta_matrix(mu) @ f.ravel()).reshape(-1, 3)


def fiber_induced_velocity(fib, f, targets, mu, include_doublet=False, allow_near=False):
    """Flow induced at distant targets by the fiber's force density.

    Clenshaw-Curtis line quadrature of the Stokeslet (plus, optionally, the
    finite-radius doublet correction with coefficient (eps L)^2 / 2).
    Targets inside the near shell must be routed through near_fiber_eval.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    f = np.asarray(f, dtype=float)
    if not allow_near:
        h = fib.L / fib.p
        d2min = _min_node_distance2(targets, fib.X)
        if np.any(d2min < (1.5 * h) ** 2):
            raise NearFieldError("target inside the fiber's near-field shell")
    strengths = fib.node_weights()[:, None] * f
    ng_t = kernels.no_groups(targets.shape[0])
    ng_s = kernels.no_groups(fib.n_nodes)
    out, bad = kernels.stokeslet_sum(targets, ng_t, fib.X, ng_s, strengths,
                                     1.0 / (8.0 * np.pi * mu))
    if bad:
        raise kernels.SingularEvaluationError("target coincides with a fiber node")
    if include_doublet:
        coeff = (fib.eps * fib.L) ** 2 / 2.0
        dbl, bad = kernels.doublet_sum(targets, ng_t, fib.X, ng_s, strengths,
                                       coeff / (8.0 * np.pi * mu))
        if bad:
            raise kernels.SingularEvaluationError("target coincides with a fiber node")
        out = out + dbl
    return out


def _min_node_distance2(targets, nodes):
    d = targets[:, None, :] - nodes[None, :, :]
    return (d * d).sum(axis=2).min(axis=1)


def reparam_velocity(fib):
    """((alpha+1) Ldot / L) X_alpha: apparent node velocity from regridding
    a fiber that grows at its plus end only."""
    Xa = fib.grid.D @ fib.X
    coef = (fib.grid.nodes + 1.0) * fib.Ldot / fib.L
    return coef[:, None] * Xa


# -- polymerization kinetics ------------------------------------------------

def growth_rate(fib, end_force, v_grow0, stall_force):
    """Load-dependent polymerization speed at the plus end.

    end_force is the force the fiber exerts on the obstacle it grows
    against; its component along the plus-end tangent is compressive when
    positive and slows growth exponentially.
    """
    if fib.growth_state == SHRINKING:
        return -fib.kinetics.v_shrink
    t_plus = fib.tangents[fib.end_index(plus=True)]
    load = float(np.dot(np.asarray(end_force, dtype=float), t_plus))
    return v_grow0 * math.exp(-(7.0 / 3.0) * load / stall_force)


def catastrophe_rate(v_g, v_g0, f_cat0, tau_cat):
    """Rate of switching to shrinkage; slows with growth speed but never
    drops below 1/tau_cat."""
    if v_g <= 0:
        raise ValueError("catastrophe rate is defined for growing fibers only")
    return max(f_cat0 * v_g0 / v_g, 1.0 / tau_cat)


def polymerization_step(fib, dt, rng):
    """Sample dynamic-instability transitions and set the growth rate.

    One uniform draw per transition test keeps runs reproducible under a
    fixed per-fiber stream.  A fiber shrinking to the minimum length is
    rescued there instantly.
    """
    if dt <= 0:
        raise ValueError("time step must be positive")
    kin = fib.kinetics
    if fib.growth_state in (GROWING, STALLED):
        v_g = fib.Ldot if fib.Ldot > 0 else kin.v_grow
        rate = catastrophe_rate(v_g, kin.v_grow, kin.f_cat, fib.tau_cat)
        if rng.random() < -math.expm1(-rate * dt):
            fib.growth_state = SHRINKING
            fib.Ldot = -kin.v_shrink
        elif fib.growth_state == GROWING and fib.Ldot <= 0:
            fib.Ldot = kin.v_grow
    elif fib.growth_state == SHRINKING:
        if rng.random() < -math.expm1(-kin.f_res * dt):
            fib.growth_state = GROWING
            fib.Ldot = kin.v_grow
        else:
            fib.Ldot = -kin.v_shrink
    if fib.Ldot < 0 and fib.L + fib.Ldot * dt < kin.min_length:
        fib.growth_state = GROWING
        fib.Ldot = (kin.min_length - fib.L) / dt
    return fib.growth_state, fib.Ldot


# -- boundary conditions ------------------------------------------------------

def end_force_torque(fib, Xcand, Tcand):
    """Minus-end force and torque a fiber applies to the body it is attached
    to: F = (-E Xsss + T Xs)|_0 and L = E (Xss x Xs)|_0."""
    Xcand = np.asarray(Xcand, dtype=float)
    Tcand = np.asarray(Tcand, dtype=float)
    k = fib.end_index(plus=False)
    Xsss = (fib.Ds3 @ Xcand)[k]
    Xss = (fib.Ds2 @ Xcand)[k]
    t = fib.tangents[k]
    F = -fib.E * Xsss + Tcand[k] * t
    L = fib.E * np.cross(Xss, t)
    return F, L


def _end_rows(fib, Xcand, Tcand, plus, bc, body_kinematics, mu=None, u_bar=None,
              homogeneous=False):
    """Residuals (vec1, vec2, tension) of the boundary equations at one end.

    With homogeneous=True every candidate-independent term (prescribed
    loads, spring anchors, current positions in velocity differences) is
    dropped, leaving the part linear in (Xcand, Tcand, U, omega); an
    implicit solver uses this split to separate operator from right-hand
    side.
    """
    k = fib.end_index(plus)
    sigma = 1.0 if plus else -1.0
    t = fib.tangents[k]
    Xss = (fib.Ds2 @ Xcand)[k]
    Xsss = (fib.Ds3 @ Xcand)[k]
    if bc.kind == "free":
        return Xss, Xsss, Tcand[k]
    if bc.kind == "prescribedForceTorque":
        Fx = -fib.E * Xsss + Tcand[k] * t
        if homogeneous:
            return Fx, Xss, Tcand[k]
        vec1 = Fx - sigma * bc.force
        vec2 = Xss - sigma * np.cross(t, bc.torque) / fib.E
        tres = Tcand[k] - sigma * (bc.force @ t + (bc.torque @ bc.torque) / fib.E)
        return vec1, vec2, tres
    if bc.kind == "hingedToSurface":
        Fx = -fib.E * Xsss + Tcand[k] * t
        anchor = 0.0 if homogeneous else bc.attachment
        spring = -bc.stiffness * (Xcand[k] - anchor)
        vec1 = Fx - sigma * spring
        vec2 = Xss
        tres = Tcand[k] - sigma * (spring @ t)
        return vec1, vec2, tres
    if bc.kind == "clampedToBody":
        if body_kinematics is None:
            raise ValueError("clamped end requires body kinematics")
        U = np.asarray(body_kinematics["U"], dtype=float)
        Om = np.asarray(body_kinematics["omega"], dtype=float)
        c = np.asarray(body_kinematics["center"], dtype=float)
        dt = float(body_kinematics["dt"])
        vel = (Xcand[k] - (0.0 if homogeneous else fib.X[k])) / dt
        vec1 = vel - U - np.cross(Om, fib.X[k] - c)
        if bc.tangent is None:
            vec2 = Xss
        else:
            ts_vel = ((fib.Ds @ Xcand)[k] - (0.0 if homogeneous else t)) / dt
            vec2 = ts_vel - np.cross(Om, t)
        if u_bar is None:
            u_bar = np.zeros(3)
        f = elastic_force_density(fib, Xcand, Tcand)
        v_self = local_mobility_apply(fib, f, mu) + nonlocal_Kdelta_apply(fib, f, mu)
        tres = float((v_self[k] + u_bar - U - np.cross(Om, fib.X[k] - c)) @ t)
        return vec1, vec2, tres
    raise ValueError(f"unknown boundary-condition kind {bc.kind!r}")


def bc_residuals(fib, Xcand, Tcand, body_kinematics=None, mu=1.0, u_bar=None,
                 homogeneous=False):
    """The 14 scalar boundary residuals: plus-end pair, minus-end pair, and
    the two tension conditions."""
    Xcand = np.asarray(Xcand, dtype=float)
    Tcand = np.asarray(Tcand, dtype=float)
    p_vec1, p_vec2, p_t = _end_rows(fib, Xcand, Tcand, True, fib.bc_plus,
                                    body_kinematics, mu, u_bar, homogeneous)
    m_vec1, m_vec2, m_t = _end_rows(fib, Xcand, Tcand, False, fib.bc_minus,
                                    body_kinematics, mu, u_bar, homogeneous)
    return np.concatenate([p_vec1, p_vec2, m_vec1, m_vec2, [p_t], [m_t]])


def resample_to_fine(values, alphas):
    """Evaluate the Chebyshev interpolant of nodal values at new points."""
    c = cheb_transform(values)
    return ncheb.chebval(alphas, c)


NEAR_SHELL_FACTOR = 1.5


def nearest_centerline_point(fib, target):
    """(alpha, point, distance) of the closest centerline point to a target.

    Coarse minimum over an eightfold-refined node set, then golden-section
    refinement of the squared distance along the interpolant.
    """
    target = np.asarray(target, dtype=float)
    cx = [cheb_transform(fib.X[:, c]) for c in range(3)]
    al = np.cos(np.linspace(0.0, np.pi, 8 * fib.p + 1))
    Xf = np.stack([ncheb.chebval(al, c) for c in cx], axis=1)
    d2 = ((Xf - target) ** 2).sum(axis=1)
    i0 = int(d2.argmin())
    lo = al[min(i0 + 1, al.size - 1)]
    hi = al[max(i0 - 1, 0)]

    def d2_at(a):
        x = np.array([ncheb.chebval(a, c) for c in cx])
        return ((x - target) ** 2).sum()

    for _ in range(50):
        m1 = lo + 0.382 * (hi - lo)
        m2 = lo + 0.618 * (hi - lo)
        if d2_at(m1) < d2_at(m2):
            hi = m2
        else:
            lo = m1
    a0 = 0.5 * (lo + hi)
    x0 = np.array([ncheb.chebval(a0, c) for c in cx])
    return a0, x0, float(np.linalg.norm(target - x0))


def _bary_rows(alphas, p):
    """Barycentric interpolation rows from the p+1 Chebyshev nodes."""
    nodes = shared_grid(p).nodes
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    w = np.ones(p + 1)
    w[1::2] = -1.0
    w[0] *= 0.5
    w[-1] *= 0.5
    d = alphas[:, None] - nodes[None, :]
    hit = np.abs(d) < 1e-14
    t = w[None, :] / np.where(hit, 1.0, d)
    rows = t / t.sum(axis=1)[:, None]
    on_node = hit.any(axis=1)
    rows[on_node] = hit[on_node].astype(float)
    return rows


def _kernel_blocks(r, include_doublet, doublet_coeff):
    """(G, 3, 3) Stokeslet blocks, optionally with the doublet correction."""
    d2 = (r * r).sum(axis=1)
    d = np.sqrt(d2)
    eye = np.eye(3)
    rr = r[:, :, None] * r[:, None, :]
    K = eye[None, :, :] / d[:, None, None] + rr / (d2 * d)[:, None, None]
    if include_doublet:
        K += doublet_coeff * (eye[None, :, :] / (d2 * d)[:, None, None]
                              - 3.0 * rr / (d2 * d2 * d)[:, None, None])
    return K


def near_fiber_weights(fib, target, mu, include_doublet=False):
    """Velocity at a near target as a linear map on the nodal force density.

    Returns W of shape (3, 3(p+1)) with W @ f.ravel() equal to
    near_fiber_eval(fib, f, target, mu, include_doublet).  The quadrature
    uses Gauss-Legendre panels that bisect until each is shorter than its
    distance to the target, which keeps the integrand resolved however
    close the target sits; approaching the near-shell boundary the panel
    value is blended into the plain collocation sum so the field is
    continuous with far-region evaluation at the handoff distance.
    """
    target = np.asarray(target, dtype=float)
    _, _, d = nearest_centerline_point(fib, target)
    if d < fib.eps * fib.L:
        raise InsideFiberError("target overlaps the fiber surface")
    n = fib.n_nodes
    coeff = (fib.eps * fib.L) ** 2 / 2.0
    cx = [cheb_transform(fib.X[:, c]) for c in range(3)]
    csa = cheb_transform(fib.s_alpha)
    gl_x, gl_w = np.polynomial.legendre.leggauss(10)

    panels = [(-1.0, 1.0, 0)]
    al_all, w_all = [], []
    while panels:
        a, b, depth = panels.pop()
        probes = np.array([a, 0.5 * (a + b), b])
        px = np.stack([ncheb.chebval(probes, c) for c in cx], axis=1)
        dmin = np.sqrt(((px - target) ** 2).sum(axis=1).min())
        width = 0.5 * (b - a) * fib.L
        if width > dmin and depth < 14:
            mid = 0.5 * (a + b)
            panels.append((a, mid, depth + 1))
            panels.append((mid, b, depth + 1))
            continue
        al_all.append(0.5 * (a + b) + 0.5 * (b - a) * gl_x)
        w_all.append(0.5 * (b - a) * gl_w)
    al = np.concatenate(al_all)
    w = np.concatenate(w_all)

    Xp = np.stack([ncheb.chebval(al, c) for c in cx], axis=1)
    sa = ncheb.chebval(al, csa)
    P = _bary_rows(al, fib.p)
    K = _kernel_blocks(target[None, :] - Xp, include_doublet, coeff)
    W = np.einsum("g,gab,gj->ajb", w * sa, K, P).reshape(3, 3 * n)
    W /= 8.0 * np.pi * mu

    shell = NEAR_SHELL_FACTOR * fib.L / fib.p
    x = (d - 0.8 * shell) / (0.2 * shell)
    if x > 0.0:
        wb = min(x, 1.0) ** 2 * (3.0 - 2.0 * min(x, 1.0))
        W = (1.0 - wb) * W + wb * plain_fiber_weights(fib, target, mu, include_doublet)
    return W


def plain_fiber_weights(fib, target, mu, include_doublet=False):
    """Collocation-sum analogue of near_fiber_weights (same linear-map form)."""
    target = np.asarray(target, dtype=float)
    coeff = (fib.eps * fib.L) ** 2 / 2.0
    K = _kernel_blocks(target[None, :] - fib.X, include_doublet, coeff)
    wn = fib.node_weights()
    W = np.einsum("j,jab->ajb", wn, K).reshape(3, 3 * fib.n_nodes)
    return W / (8.0 * np.pi * mu)


def near_fiber_eval(fib, f, target, mu, include_doublet=False):
    """Velocity near (but outside) the fiber.

    Close to the centerline the induced flow comes from panel-refined
    quadrature; approaching the near-shell boundary it is blended into the
    plain collocation sum so that the field is continuous with far-region
    direct evaluation at the handoff distance.
    """
    f = np.asarray(f, dtype=float)
    W = near_fiber_weights(fib, target, mu, include_doublet=include_doublet)
    return W @ f.ravel()
