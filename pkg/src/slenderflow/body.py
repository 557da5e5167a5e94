"""Closed-surface geometry and layer potentials.

Surfaces of revolution (spheres and polar radius profiles R(theta)) are
quadrangulated on a uniform trapezoidal grid in the polar and azimuthal
angles, with a fixed 4x4 tensor Gauss-Legendre rule inside each patch.
On top of the mesh live the double-layer operators used by the second-kind
formulation for rigid particles and the confining periphery, together with
nearly singular evaluation close to the surface.
"""

import io
import math

import numpy as np
from scipy import sparse

from . import kernels

GL_NODES, GL_WEIGHTS = np.polynomial.legendre.leggauss(4)
GL01_NODES = 0.5 * (GL_NODES + 1.0)
GL01_WEIGHTS = 0.5 * GL_WEIGHTS

NEAR_SHELL_FACTOR = 1.5


class GeometryError(ValueError):
    pass


def sphere_shape(radius):
    if radius <= 0:
        raise GeometryError("sphere radius must be positive")
    return ("sphere", radius, lambda th: np.full_like(np.asarray(th, dtype=float), float(radius)),
            lambda th: np.zeros_like(np.asarray(th, dtype=float)))


def s1_shape(a):
    R = lambda th: a * (1.0 - 0.35 * np.cos(th) ** 3 - 0.15 * np.sin(th) ** 3)
    Rp = lambda th: a * (1.05 * np.cos(th) ** 2 * np.sin(th)
                         - 0.45 * np.sin(th) ** 2 * np.cos(th))
    return ("s1", a, R, Rp)


def s2_shape(a):
    R = lambda th: a * (1.0 + 0.2 * np.cos(2 * th) - 0.2 * np.sin(2 * th))
    Rp = lambda th: a * (-0.4 * np.sin(2 * th) - 0.4 * np.cos(2 * th))
    return ("s2", a, R, Rp)


def s3_shape(a):
    R = lambda th: a * (1.0 - 0.6 * np.sin(th) ** 4)
    Rp = lambda th: a * (-2.4 * np.sin(th) ** 3 * np.cos(th))
    return ("s3", a, R, Rp)


def profile_shape(R, Rp=None, name="profile", param=0.0):
    if Rp is None:
        def Rp(th, _R=R, h=1e-5):
            return (_R(np.asarray(th) + h) - _R(np.asarray(th) - h)) / (2 * h)
    return (name, param, R, Rp)


_NAMED_SHAPES = {"s1": s1_shape, "s2": s2_shape, "s3": s3_shape}


def named_shape(kind, param):
    if kind == "sphere":
        return sphere_shape(param)
    if kind in _NAMED_SHAPES:
        return _NAMED_SHAPES[kind](param)
    raise GeometryError(f"unknown shape {kind!r}")


class SurfaceMesh:
    """Patchwise Gauss-Legendre quadrature mesh on a surface of revolution.

    Nodes are ordered patch-major: patch (it, ip) holds a 4x4 (theta, phi)
    tensor block.  `weights` fold the Gauss weights, patch extents, and the
    surface Jacobian, so a surface integral is a plain weighted sum.
    """

    def __init__(self, nodes, normals, weights, thetas=None, phis=None,
                 patch_grid=None, shape=None, center=(0.0, 0.0, 0.0)):
        self.nodes = np.asarray(nodes, dtype=float)
        self.normals = np.asarray(normals, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        if self.nodes.shape != self.normals.shape or self.nodes.shape[0] != self.weights.shape[0]:
            raise GeometryError("mesh arrays must agree in length")
        self.thetas = thetas
        self.phis = phis
        self.patch_grid = patch_grid
        self.shape = shape
        self.center = np.asarray(center, dtype=float)
        self.area = float(self.weights.sum())
        if self.area <= 0:
            raise GeometryError("surface must have positive area")
        self.h = math.sqrt(self.area / self.nodes.shape[0])
        self._refined = {}
        self._interp_mats = {}

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    def has_parametrization(self):
        return self.shape is not None and self.patch_grid is not None

    def refined(self, factor):
        """Same surface, patch counts multiplied; cached by factor."""
        if not self.has_parametrization():
            raise GeometryError("refinement requires a parametrized mesh")
        if factor not in self._refined:
            nt, np_ = self.patch_grid
            self._refined[factor] = make_surface(
                self.shape, (nt * factor, np_ * factor), center=self.center)
        return self._refined[factor]

    def surface_point(self, theta, phi):
        R = self.shape[2](theta)
        st, ct = np.sin(theta), np.cos(theta)
        return self.center + R * np.array([st * np.cos(phi), st * np.sin(phi), ct])

    def radial_bound(self, theta):
        return float(self.shape[2](theta))


def make_surface(shape, resolution, center=(0.0, 0.0, 0.0)):
    """Quadrangulate a sphere or polar profile R(theta) about `center`.

    `shape` is a tuple from sphere_shape/s1_shape/... or ("sphere", r)-style
    pair; `resolution` is the patch count, an int n for (n, n) or an
    explicit (n_theta, n_phi).
    """
    if isinstance(shape, tuple) and len(shape) == 2:
        shape = named_shape(*shape)
    kind, param, R, Rp = shape
    if isinstance(resolution, int):
        nt, np_ = resolution, resolution
    else:
        nt, np_ = resolution
    if nt < 2 or np_ < 2:
        raise GeometryError("need at least 2 patches per direction")

    th_edges = np.linspace(0.0, np.pi, nt + 1)
    ph_edges = np.linspace(0.0, 2.0 * np.pi, np_ + 1)
    th_all, ph_all, w_all = [], [], []
    for it in range(nt):
        t0, t1 = th_edges[it], th_edges[it + 1]
        tn = t0 + (t1 - t0) * GL01_NODES
        tw = (t1 - t0) * GL01_WEIGHTS
        for ip in range(np_):
            p0, p1 = ph_edges[ip], ph_edges[ip + 1]
            pn = p0 + (p1 - p0) * GL01_NODES
            pw = (p1 - p0) * GL01_WEIGHTS
            T, P = np.meshgrid(tn, pn, indexing="ij")
            W = np.outer(tw, pw)
            th_all.append(T.ravel())
            ph_all.append(P.ravel())
            w_all.append(W.ravel())
    th = np.concatenate(th_all)
    ph = np.concatenate(ph_all)
    w_param = np.concatenate(w_all)

    r = np.asarray(R(th), dtype=float)
    if np.any(r <= 0):
        raise GeometryError("radius profile must be positive on [0, pi]")
    rp = np.asarray(Rp(th), dtype=float)
    st, ct = np.sin(th), np.cos(th)
    sp, cp = np.sin(ph), np.cos(ph)

    pos = np.stack([r * st * cp, r * st * sp, r * ct], axis=1)
    # x_theta = (r' sin + r cos) e_rho + (r' cos - r sin) e_z ; x_phi = r sin e_phi
    drho = rp * st + r * ct
    dz = rp * ct - r * st
    x_t = np.stack([drho * cp, drho * sp, dz], axis=1)
    x_p = np.stack([-r * st * sp, r * st * cp, np.zeros_like(th)], axis=1)
    cross = np.cross(x_t, x_p)
    J = np.linalg.norm(cross, axis=1)
    normals = cross / np.where(J > 0, J, 1.0)[:, None]

    mesh = SurfaceMesh(pos + np.asarray(center, dtype=float), normals, w_param * J,
                       thetas=th, phis=ph, patch_grid=(nt, np_),
                       shape=(kind, param, R, Rp), center=center)
    return mesh


def surface_integral(mesh, f):
    """Quadrature sum over the mesh; f may be scalar or vector nodal data."""
    f = np.asarray(f, dtype=float)
    if f.shape[0] != mesh.n_nodes:
        raise ValueError("nodal data does not conform to the mesh")
    if f.ndim == 1:
        return float(mesh.weights @ f)
    return mesh.weights @ f


class RigidParticle:
    """Closed rigid surface with its double-layer density and wrenches."""

    def __init__(self, mesh, center=None):
        self.mesh = mesh
        self.center = np.asarray(center if center is not None else mesh.center, dtype=float)
        self.q = np.zeros((mesh.n_nodes, 3))
        self.U = np.zeros(3)
        self.omega = np.zeros(3)
        self.F_ext = np.zeros(3)
        self.L_ext = np.zeros(3)

    def translate(self, displacement):
        d = np.asarray(displacement, dtype=float)
        m = self.mesh
        moved = SurfaceMesh(m.nodes + d, m.normals, m.weights, m.thetas, m.phis,
                            m.patch_grid, m.shape, m.center + d)
        self.mesh = moved
        self.center = self.center + d


class Periphery:
    """Confining outer surface; fluid lives on its interior side."""

    def __init__(self, mesh):
        if not mesh.has_parametrization():
            raise GeometryError("periphery requires a parametrized mesh")
        self.mesh = mesh
        self.q = np.zeros((mesh.n_nodes, 3))

    def contains(self, points, margin=0.0):
        """Star-shaped radial test against R(theta), minus a safety margin."""
        pts = np.atleast_2d(np.asarray(points, dtype=float)) - self.mesh.center
        rho = np.linalg.norm(pts, axis=1)
        with np.errstate(invalid="ignore"):
            th = np.arccos(np.clip(np.where(rho > 0, pts[:, 2] / np.where(rho > 0, rho, 1.0), 1.0), -1, 1))
        Rth = np.asarray(self.mesh.shape[2](th), dtype=float)
        return rho <= Rth - margin


def double_layer_offsurface(mesh, q, targets, mu, allow_near=False):
    """Stresslet quadrature at targets away from the surface."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    q = np.asarray(q, dtype=float)
    if not allow_near:
        d2 = _min_node_dist2(targets, mesh.nodes)
        if np.any(d2 < (NEAR_SHELL_FACTOR * mesh.h) ** 2):
            raise kernels.NearFieldError("target inside the near shell; route through near_surface_eval")
    qw = q * mesh.weights[:, None]
    out, bad = kernels.stresslet_sum(targets, kernels.no_groups(targets.shape[0]),
                                     mesh.nodes, kernels.no_groups(mesh.n_nodes),
                                     mesh.normals, qw, -3.0 / (4.0 * np.pi * mu))
    if bad:
        raise kernels.SingularEvaluationError("target coincides with a mesh node")
    return out


def double_layer_onsurface(mesh, q, mu):
    """Principal-value double layer via singularity subtraction.

    Returns the smooth quadrature of T[q - q(x)](x), which equals the
    second-kind combination -q(x)/(2 mu) + PV T[q](x) in exact arithmetic.
    """
    q = np.asarray(q, dtype=float)
    return kernels.stresslet_sum_subtracted(mesh.nodes, mesh.normals, mesh.weights,
                                            q, -3.0 / (4.0 * np.pi * mu))


def nullspace_operator(periphery, q):
    """Rank completion n(x) * flux of q through the periphery."""
    mesh = periphery.mesh if isinstance(periphery, Periphery) else periphery
    flux = float(mesh.weights @ (mesh.normals * np.asarray(q, dtype=float)).sum(axis=1))
    return mesh.normals * flux


def completion_flow(particle, targets, mu):
    """Stokeslet plus rotlet at the particle center carrying its net wrench."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    r = targets - particle.center
    d = np.linalg.norm(r, axis=1)
    if np.any(d < kernels.MIN_SEPARATION):
        raise kernels.SingularEvaluationError("target at the particle center")
    pref = 1.0 / (8.0 * np.pi * mu)
    rf = r @ particle.F_ext
    u = pref * (particle.F_ext[None, :] / d[:, None] + (rf / d**3)[:, None] * r)
    u += pref * np.cross(particle.L_ext[None, :], r) / (d**3)[:, None]
    return u


def rigid_constraint_averages(particle, q):
    """Area averages of the density and of its moment about the center."""
    mesh = particle.mesh
    q = np.asarray(q, dtype=float)
    if mesh.area <= 0:
        raise GeometryError("zero-area surface")
    u_avg = (mesh.weights[:, None] * q).sum(axis=0) / mesh.area
    arm = mesh.nodes - particle.center
    om_avg = (mesh.weights[:, None] * np.cross(arm, q)).sum(axis=0) / mesh.area
    return u_avg, om_avg


# -- nearly singular evaluation ----------------------------------------------

def _min_node_dist2(targets, nodes):
    d = targets[:, None, :] - nodes[None, :, :]
    return (d * d).sum(axis=2).min(axis=1)


def _lagrange_coeffs(x, nodes):
    """Rows of Lagrange cardinal weights; x may be scalar or 1D."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    c = np.ones((x.size, len(nodes)))
    for i in range(len(nodes)):
        for j in range(len(nodes)):
            if i != j:
                c[:, i] *= (x - nodes[j]) / (nodes[i] - nodes[j])
    return c


def interpolate_nodal(mesh, values, theta, phi):
    """Evaluate nodal data at (theta, phi) points by 4x4 tensor Lagrange
    interpolation inside the containing patches."""
    if not mesh.has_parametrization():
        raise GeometryError("interpolation requires a parametrized mesh")
    scalar_query = np.isscalar(theta)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float)) % (2.0 * np.pi)
    nt, np_ = mesh.patch_grid
    dth = np.pi / nt
    dph = 2.0 * np.pi / np_
    it = np.minimum((theta / dth).astype(int), nt - 1)
    ip = np.minimum((phi / dph).astype(int), np_ - 1)
    cu = _lagrange_coeffs((theta - it * dth) / dth, GL01_NODES)
    cv = _lagrange_coeffs((phi - ip * dph) / dph, GL01_NODES)
    vals = np.asarray(values, dtype=float)
    flat = vals.reshape(vals.shape[0], -1)
    idx = ((it * np_ + ip) * 16)[:, None] + np.arange(16)
    block = flat[idx].reshape(theta.size, 4, 4, -1)
    out = np.einsum("mi,mj,mijk->mk", cu, cv, block)
    if vals.ndim == 1:
        out = out[:, 0]
    return (out[0] if vals.ndim > 1 else float(out[0])) if scalar_query else out


def interpolation_matrix(mesh, fine):
    """Sparse map from nodal values on `mesh` to nodal values on `fine`.

    Rows reproduce interpolate_nodal at the fine nodes: each holds the 16
    tensor-Lagrange coefficients of the containing coarse patch.  Cached on
    the coarse mesh by the fine patch grid.
    """
    if not mesh.has_parametrization():
        raise GeometryError("interpolation requires a parametrized mesh")
    key = fine.patch_grid
    if key in mesh._interp_mats:
        return mesh._interp_mats[key]
    theta = np.asarray(fine.thetas, dtype=float)
    phi = np.asarray(fine.phis, dtype=float) % (2.0 * np.pi)
    nt, np_ = mesh.patch_grid
    dth = np.pi / nt
    dph = 2.0 * np.pi / np_
    it = np.minimum((theta / dth).astype(int), nt - 1)
    ip = np.minimum((phi / dph).astype(int), np_ - 1)
    cu = _lagrange_coeffs((theta - it * dth) / dth, GL01_NODES)
    cv = _lagrange_coeffs((phi - ip * dph) / dph, GL01_NODES)
    vals = np.einsum("mi,mj->mij", cu, cv).reshape(theta.size, 16)
    cols = ((it * np_ + ip) * 16)[:, None] + np.arange(16)
    rows = np.repeat(np.arange(theta.size), 16)
    B = sparse.csr_matrix((vals.ravel(), (rows, cols.ravel())),
                          shape=(theta.size, mesh.n_nodes))
    mesh._interp_mats[key] = B
    return B


def nearest_surface_point(mesh, target):
    """(theta, phi, point, signed distance) of the closest surface point.

    Axisymmetric surfaces put the nearest point in the target's meridian
    plane; the polar angle comes from golden-section search.  The distance
    is negative on the interior side.
    """
    if not mesh.has_parametrization():
        raise GeometryError("projection requires a parametrized mesh")
    t = np.asarray(target, dtype=float)
    rel = t - mesh.center
    rho = math.hypot(rel[0], rel[1])
    phi = math.atan2(rel[1], rel[0]) if rho > 1e-14 else 0.0
    R = mesh.shape[2]

    def dist2(th):
        r = float(R(th))
        drho = r * math.sin(th) - rho
        dz = r * math.cos(th) - rel[2]
        return drho * drho + dz * dz

    lo, hi = 0.0, math.pi
    scan = np.linspace(lo, hi, 65)
    vals = [dist2(x) for x in scan]
    i0 = int(np.argmin(vals))
    lo = scan[max(i0 - 1, 0)]
    hi = scan[min(i0 + 1, 64)]
    for _ in range(40):
        m1 = lo + 0.382 * (hi - lo)
        m2 = lo + 0.618 * (hi - lo)
        if dist2(m1) < dist2(m2):
            hi = m2
        else:
            lo = m1
    th0 = 0.5 * (lo + hi)
    # golden section stalls ~sqrt(eps) from a quadratic minimum; polish with
    # Newton on the derivative unless the minimum sits at a pole
    fd = 1e-6
    for _ in range(3):
        g = (dist2(th0 + fd) - dist2(th0 - fd)) / (2 * fd)
        gpp = (dist2(th0 + fd) - 2 * dist2(th0) + dist2(th0 - fd)) / fd**2
        if gpp <= 0:
            break
        step = g / gpp
        cand = min(max(th0 - step, 0.0), math.pi)
        if dist2(cand) <= dist2(th0):
            th0 = cand
    x0 = mesh.surface_point(th0, phi)
    d = float(np.linalg.norm(t - x0))
    r_t = np.linalg.norm(rel)
    th_t = math.acos(min(max(rel[2] / r_t, -1.0), 1.0)) if r_t > 0 else 0.0
    inside = r_t < float(R(th_t))
    return th0, phi, x0, (-d if inside else d)


def _onsurface_value_at(mesh, q, theta, phi, mu):
    """Subtracted double layer at an arbitrary surface point."""
    x0 = mesh.surface_point(theta, phi)
    q0 = np.asarray(interpolate_nodal(mesh, q, theta, phi), dtype=float)
    qw = (np.asarray(q, dtype=float) - q0[None, :]) * mesh.weights[:, None]
    out, _ = kernels.stresslet_sum(x0[None, :], kernels.no_groups(1),
                                   mesh.nodes, kernels.no_groups(mesh.n_nodes),
                                   mesh.normals, qw, -3.0 / (4.0 * np.pi * mu))
    return out[0], q0


def plain_surface_weights(mesh, target, mu):
    """Stresslet quadrature at one target as a (3, 3N) map on the density."""
    target = np.asarray(target, dtype=float)
    r = target[None, :] - mesh.nodes
    d2 = (r * r).sum(axis=1)
    live = d2 > kernels.MIN_SEPARATION ** 2
    nr = (mesh.normals * r).sum(axis=1)
    scal = np.zeros(mesh.n_nodes)
    scal[live] = (-3.0 / (4.0 * np.pi * mu)) * mesh.weights[live] * nr[live] \
        / (d2[live] ** 2 * np.sqrt(d2[live]))
    W = scal[None, :, None] * r.T[:, :, None] * r[None, :, :]
    return W.reshape(3, 3 * mesh.n_nodes)


def _interp_row(mesh, theta, phi):
    """Dense row vector reproducing interpolate_nodal at one point."""
    nt, np_ = mesh.patch_grid
    dth = np.pi / nt
    dph = 2.0 * np.pi / np_
    phi = phi % (2.0 * np.pi)
    it = min(int(theta / dth), nt - 1)
    ip = min(int(phi / dph), np_ - 1)
    cu = _lagrange_coeffs((theta - it * dth) / dth, GL01_NODES)[0]
    cv = _lagrange_coeffs((phi - ip * dph) / dph, GL01_NODES)[0]
    row = np.zeros(mesh.n_nodes)
    row[(it * np_ + ip) * 16 + np.arange(16)] = np.outer(cu, cv).ravel()
    return row


def _subtracted_rows_at(mesh, theta, phi, mu, jump):
    """(3, N, 3) map of the subtracted double layer at a surface point,
    plus `jump` times the interpolated density."""
    x0 = mesh.surface_point(theta, phi)
    rows = plain_surface_weights(mesh, x0, mu).reshape(3, mesh.n_nodes, 3)
    RS = rows.sum(axis=1)
    r0 = _interp_row(mesh, theta, phi)
    rows -= RS[:, None, :] * r0[None, :, None]
    if jump != 0.0:
        rows += jump * np.eye(3)[:, None, :] * r0[None, :, None]
    return rows


def near_surface_weights(mesh, target, mu, interior_jump=True, upsample=6):
    """Nearly singular evaluation as a (3, 3N) map on the nodal density.

    One-dimensional polynomial interpolation along the ray through the
    nearest surface point: the anchor is the one-sided surface limit
    (subtracted principal value, plus the +q/mu jump on the interior side),
    and three off-surface samples at 1.5h, 2.25h, and 3.375h are evaluated
    on an upsampled mesh to keep their quadrature error below the
    interpolation tolerance.  The map resolves to the coarse nodal density
    through the patchwise interpolation matrix, so it can be cached while
    the density changes.
    """
    target = np.asarray(target, dtype=float)
    th0, ph0, x0, signed_d = nearest_surface_point(mesh, target)
    d = abs(signed_d)
    interior = signed_d < 0

    if d < 1e-8 * mesh.h:
        jump = (1.0 / mu) if interior_jump else 0.0
        return _subtracted_rows_at(mesh, th0, ph0, mu, jump).reshape(3, 3 * mesh.n_nodes)

    fine = mesh.refined(upsample) if upsample > 1 else mesh
    jump = (1.0 / mu) if (interior and interior_jump) else 0.0
    Wf = _subtracted_rows_at(fine, th0, ph0, mu, jump)

    normal_dir = (target - x0) / d
    c = NEAR_SHELL_FACTOR * mesh.h
    dists = np.array([0.0, c, 1.5 * c, 2.25 * c])
    ell = _lagrange_coeffs(d, dists)[0]
    Wf = ell[0] * Wf
    for k in range(1, 4):
        pt = x0 + dists[k] * normal_dir
        Wf += ell[k] * plain_surface_weights(fine, pt, mu).reshape(3, fine.n_nodes, 3)
    if fine is mesh:
        return Wf.reshape(3, 3 * mesh.n_nodes)
    B = interpolation_matrix(mesh, fine)
    W = np.empty((3, mesh.n_nodes, 3))
    for a in range(3):
        for b in range(3):
            W[a, :, b] = B.T @ Wf[a, :, b]
    return W.reshape(3, 3 * mesh.n_nodes)


def near_surface_eval(mesh, q, target, mu, interior_jump=True, upsample=6):
    """Velocity at a target close to the surface (see near_surface_weights)."""
    q = np.asarray(q, dtype=float)
    W = near_surface_weights(mesh, target, mu, interior_jump=interior_jump,
                             upsample=upsample)
    return W @ q.ravel()


def second_kind_matrix(mesh, mu, interior=True, nullspace_scale=None):
    """Dense matrix of the one-sided double-layer operator.

    Off-diagonal 3x3 blocks are the weighted stresslet kernel; diagonal
    blocks carry the singularity subtraction (negative row sum) plus the
    one-sided jump (+I/mu on the interior side, none on the exterior).
    Passing nullspace_scale adds the rank completion
    nullspace_scale * n(x) (n.q integral) used for the periphery.
    Intended for small meshes: direct solves, preconditioners, spectra.
    """
    x = mesh.nodes
    n = mesh.normals
    w = mesh.weights
    N = mesh.n_nodes
    pref = -3.0 / (4.0 * np.pi * mu)
    r = x[:, None, :] - x[None, :, :]
    d2 = (r * r).sum(axis=2)
    np.fill_diagonal(d2, 1.0)
    d = np.sqrt(d2)
    rhat = r / d[:, :, None]
    ndotr = (rhat * n[None, :, :]).sum(axis=2)
    scal = pref * ndotr / d2 * w[None, :]
    blocks = scal[:, :, None, None] * rhat[:, :, None, :] * rhat[:, :, :, None]
    idx = np.arange(N)
    blocks[idx, idx] = 0.0
    A = blocks.transpose(0, 2, 1, 3).reshape(3 * N, 3 * N)
    rowsum = blocks.sum(axis=1)
    for i in range(N):
        A[3 * i:3 * i + 3, 3 * i:3 * i + 3] -= rowsum[i]
    if interior:
        A += np.eye(3 * N) / mu
    if nullspace_scale is not None:
        nw = (n * w[:, None]).reshape(-1)
        A += nullspace_scale * np.outer(n.reshape(-1), nw)
    return A


# -- mesh import/export -------------------------------------------------------

MESH_FORMAT_VERSION = 1


def mesh_to_text(mesh):
    """Columnar text: one node per line with position, outward normal, and
    Jacobian-weight; a comment header records the parametrization so the
    mesh round-trips exactly."""
    buf = io.StringIO()
    buf.write(f"# surface-mesh v{MESH_FORMAT_VERSION}\n")
    if mesh.has_parametrization():
        kind, param = mesh.shape[0], mesh.shape[1]
        nt, np_ = mesh.patch_grid
        cx, cy, cz = (float(v) for v in mesh.center)
        buf.write(f"# shape {kind} {float(param):.17g} patches {nt} {np_} "
                  f"center {cx:.17g} {cy:.17g} {cz:.17g}\n")
    buf.write("# columns: x y z nx ny nz w\n")
    for x, n, w in zip(mesh.nodes, mesh.normals, mesh.weights):
        buf.write(" ".join(f"{float(v):.17g}" for v in (*x, *n, w)) + "\n")
    return buf.getvalue()


def mesh_from_text(text):
    """Rebuild a mesh from mesh_to_text output.

    If the header names a known shape the parametrized mesh is
    reconstructed (bitwise-identical geometry); otherwise a bare quadrature
    mesh is returned that supports integrals and layer potentials but not
    near-surface work.
    """
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# surface-mesh v"):
        raise ValueError("not a surface-mesh file")
    version = int(lines[0].rsplit("v", 1)[1])
    if version > MESH_FORMAT_VERSION:
        raise ValueError(f"unsupported mesh format version {version}")
    shape_line = next((l for l in lines if l.startswith("# shape ")), None)
    rows = np.array([[float(tok) for tok in l.split()]
                     for l in lines if l and not l.startswith("#")])
    if rows.shape[1] != 7:
        raise ValueError("expected 7 columns: x y z nx ny nz w")
    if shape_line is not None:
        toks = shape_line.split()
        kind, param = toks[2], float(toks[3])
        nt, np_ = int(toks[5]), int(toks[6])
        center = tuple(float(v) for v in toks[8:11])
        mesh = make_surface(named_shape(kind, param), (nt, np_), center=center)
        if not np.allclose(mesh.nodes, rows[:, 0:3], atol=1e-12):
            raise ValueError("mesh data disagrees with its shape header")
        return mesh
    return SurfaceMesh(rows[:, 0:3], rows[:, 3:6], rows[:, 6])
