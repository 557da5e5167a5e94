"""Global simulation state and complementary-flow accounting.

The complementary velocity of a constituent is the flow induced at its
nodes by every other constituent: fibers contribute slender-body Stokeslet
(plus finite-radius doublet) quadrature, rigid particles their double
layer and a completion flow carrying the net wrench, and the periphery its
double layer.  Pairwise sums handle well-separated geometry; targets
inside a source's near shell are corrected through the nearly singular
evaluators.  All near corrections are cached as small linear maps keyed to
the frozen geometry, so an implicit solver can reapply them cheaply while
densities change from iteration to iteration.

Active force models (uniform body load, cortical pushing springs,
cytoplasmic pulling) and the attachment layouts used by the experiments
live here as well.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import body as bodies
from . import fiber as fibers_
from . import kernels

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


class ConfigurationError(ValueError):
    pass


class OverlapError(ValueError):
    """A target point lies inside another constituent's volume."""


# -- force models --------------------------------------------------------------

class UniformBodyForce:
    """Constant external force per unit length along a fixed direction."""

    kind = "uniformBodyForce"

    def __init__(self, f0, direction=(0.0, 0.0, 1.0)):
        d = np.asarray(direction, dtype=float)
        nrm = np.linalg.norm(d)
        if nrm == 0.0:
            raise ConfigurationError("load direction must be nonzero")
        self.f0 = float(f0)
        self.direction = d / nrm

    def __repr__(self):
        return f"UniformBodyForce(f0={self.f0}, direction={tuple(self.direction)})"


class CorticalPushing:
    """Hinged spring attachment of growing plus-ends at the periphery.

    A growing fiber whose plus-end comes within `contact_distance` of the
    confining surface is pinned to its first-contact point by a linear
    spring of the given stiffness; while attached it catastrophizes at
    least at rate 1/tau_cat and is released when it starts shrinking.
    """

    kind = "corticalPushing"

    def __init__(self, stiffness, contact_distance, tau_cat):
        if stiffness < 0 or contact_distance < 0:
            raise ConfigurationError(
                "spring stiffness and contact distance must be nonnegative")
        if tau_cat <= 0:
            raise ConfigurationError("contact catastrophe time must be positive")
        self.stiffness = float(stiffness)
        self.contact_distance = float(contact_distance)
        self.tau_cat = float(tau_cat)


class CytoplasmicPulling:
    """Continuum dynein field dragging each fiber toward its plus end."""

    kind = "cytoplasmicPulling"

    def __init__(self, motor_force=0.91, motor_density=0.04):
        if motor_force < 0 or motor_density < 0:
            raise ConfigurationError("motor force and density must be nonnegative")
        self.motor_force = float(motor_force)
        self.motor_density = float(motor_density)


# -- summation backends ---------------------------------------------------------

class DirectSummation:
    """Pairwise Stokeslet summation, exact up to rounding."""

    kind = "direct"

    def stokeslet(self, sources, source_groups, strengths, targets, target_groups, mu):
        out, bad = kernels.stokeslet_sum(targets, target_groups, sources,
                                         source_groups, strengths,
                                         1.0 / (8.0 * np.pi * mu))
        if bad:
            raise kernels.SingularEvaluationError(
                "a target coincides with a source outside its own group")
        return out


class _OctNode:
    __slots__ = ("idx", "children", "c", "F", "D", "s", "A2", "Fabs")


def _build_octree(pts, strengths, idx, center, half, leaf_size, depth):
    node = _OctNode()
    node.idx = idx
    sub = pts[idx]
    f = strengths[idx]
    node.c = sub.mean(axis=0)
    dy = sub - node.c
    r2 = (dy * dy).sum(axis=1)
    node.s = math.sqrt(float(r2.max()))
    node.F = f.sum(axis=0)
    node.D = f.T @ dy
    fn = np.linalg.norm(f, axis=1)
    node.A2 = float(fn @ r2)
    node.Fabs = float(fn.sum())
    node.children = None
    if idx.size <= leaf_size or depth >= 48 or half < 1e-12:
        return node
    octant = ((sub[:, 0] > center[0]).astype(int) * 4
              + (sub[:, 1] > center[1]).astype(int) * 2
              + (sub[:, 2] > center[2]).astype(int))
    kids = []
    for o in range(8):
        m = octant == o
        if not m.any():
            continue
        shift = (np.array([(o >> 2) & 1, (o >> 1) & 1, o & 1]) * 2.0 - 1.0) * (half / 2.0)
        kids.append(_build_octree(pts, strengths, idx[m], center + shift,
                                  half / 2.0, leaf_size, depth + 1))
    node.children = kids
    return node


def _mono_dipole(r, d, F, D, pref):
    """Field of a cell's monopole and dipole moments at displaced targets."""
    id3 = 1.0 / d**3
    rf = r @ F
    u = F[None, :] / d[:, None] + (rf * id3)[:, None] * r
    Dr = r @ D.T
    DTr = r @ D
    rDr = (r * Dr).sum(axis=1)
    u += (Dr - DTr - np.trace(D) * r) * id3[:, None]
    u += 3.0 * (rDr / d**5)[:, None] * r
    return pref * u


class TreeSummation:
    """Octree Stokeslet summation with monopole+dipole cells.

    A cell is evaluated through its moments only when it satisfies the
    geometric opening criterion s <= theta*d and an analytic bound on the
    truncated quadratic term stays below cell_tolerance times the cell's
    own contribution scale; otherwise its children are visited (direct
    sums at the leaves).  Group exclusion is recovered by subtracting each
    group's direct partial sum from the all-source result, which cancels
    exactly because nearby sources always fail the opening criterion.

    With the default cell tolerance the analytic gate dominates theta, so
    moments are substituted only for overwhelmingly well-separated cells
    and mixed geometry degrades gracefully to blocked direct summation.
    That is the price of guaranteeing the cross-backend tolerance with a
    first-order expansion; genuinely linear-time summation needs the
    high-order expansions of a fast multipole method.
    """

    kind = "treeAccelerated"
    _C2 = 16.0

    def __init__(self, theta=0.5, leaf_size=32, cell_tolerance=1e-8):
        if not 0.0 < theta < 1.0:
            raise ConfigurationError("opening parameter must lie in (0, 1)")
        if leaf_size < 1:
            raise ConfigurationError("leaf size must be at least 1")
        if cell_tolerance <= 0:
            raise ConfigurationError("cell tolerance must be positive")
        self.theta = float(theta)
        self.leaf_size = int(leaf_size)
        self.cell_tolerance = float(cell_tolerance)

    def stokeslet(self, sources, source_groups, strengths, targets, target_groups, mu):
        pref = 1.0 / (8.0 * np.pi * mu)
        out = self._eval(sources, strengths, targets, pref)
        for g in np.unique(source_groups[source_groups >= 0]):
            ts = np.nonzero(target_groups == g)[0]
            if ts.size == 0:
                continue
            ss = np.nonzero(source_groups == g)[0]
            part, _ = kernels.stokeslet_sum(targets[ts], kernels.no_groups(ts.size),
                                            sources[ss], kernels.no_groups(ss.size),
                                            strengths[ss], pref)
            out[ts] -= part
        return out

    def _eval(self, pts, strengths, targets, pref):
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        half = 0.5 * float((hi - lo).max()) + 1e-9
        root = _build_octree(pts, strengths, np.arange(pts.shape[0]),
                             0.5 * (lo + hi), half, self.leaf_size, 0)
        out = np.zeros((targets.shape[0], 3))
        stack = [(root, np.arange(targets.shape[0]))]
        while stack:
            node, tid = stack.pop()
            if node.children is None:
                part, _ = kernels.stokeslet_sum(
                    targets[tid], kernels.no_groups(tid.size),
                    pts[node.idx], kernels.no_groups(node.idx.size),
                    strengths[node.idx], pref)
                out[tid] += part
                continue
            r = targets[tid] - node.c
            d = np.sqrt((r * r).sum(axis=1))
            ok = (d > 0) & (node.s <= self.theta * d) \
                & (self._C2 * node.A2 <= self.cell_tolerance * node.Fabs * d * d)
            far = tid[ok]
            if far.size:
                out[far] += _mono_dipole(r[ok], d[ok], node.F, node.D, pref)
            rest = tid[~ok]
            if rest.size:
                for child in node.children:
                    stack.append((child, rest))
        return out


# -- system state ----------------------------------------------------------------

class SystemState:
    """Everything the stepper owns: constituents, fluid, force models, clock."""

    def __init__(self, fibers, particles=(), periphery=None, mu=1.0, time=0.0,
                 force_models=(), seed=None):
        if mu <= 0:
            raise ConfigurationError("viscosity must be positive")
        self.fibers = list(fibers)
        self.particles = list(particles)
        self.periphery = periphery
        self.mu = float(mu)
        self.time = float(time)
        self.force_models = list(force_models)
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.validate()

    def validate(self):
        if self.periphery is not None:
            for i, fib in enumerate(self.fibers):
                if not np.all(self.periphery.contains(fib.X)):
                    raise ConfigurationError(f"fiber {i} leaves the confining periphery")
            for i, part in enumerate(self.particles):
                if not np.all(self.periphery.contains(part.mesh.nodes)):
                    raise ConfigurationError(f"particle {i} leaves the confining periphery")
        for i, fib in enumerate(self.fibers):
            if fib.bc_plus.kind == "clampedToBody":
                raise ConfigurationError("plus-end clamping is not supported")
            for bc in (fib.bc_minus, fib.bc_plus):
                if bc.kind == "clampedToBody" and not 0 <= bc.body < len(self.particles):
                    raise ConfigurationError(
                        f"fiber {i} is clamped to a body outside the system")
                if bc.kind == "hingedToSurface" and self.periphery is None:
                    raise ConfigurationError(
                        f"fiber {i} is hinged to a surface but no periphery is present")

    def model(self, kind):
        """First configured force model of the given kind, or None."""
        for m in self.force_models:
            if m.kind == kind:
                return m
        return None


# -- external forces and attachment wrenches -------------------------------------

def cytoplasmic_pull_density(fib, motor_force, motor_density):
    """Tangential motor force density toward the plus end, and its integral.

    The total equals motor_force * motor_density times the end-to-end
    vector, since the tangent integrates to exactly that.
    """
    if motor_force < 0 or motor_density < 0:
        raise ConfigurationError("motor force and density must be nonnegative")
    scale = motor_force * motor_density
    density = scale * fib.tangents
    total = scale * (fib.X[fib.end_index(plus=True)] - fib.X[fib.end_index(plus=False)])
    return density, total


def external_force_density(state, fib):
    """Per-node external force density from the active force models."""
    f = np.zeros((fib.n_nodes, 3))
    for m in state.force_models:
        if m.kind == "uniformBodyForce":
            f += m.f0 * m.direction[None, :]
        elif m.kind == "cytoplasmicPulling":
            f += cytoplasmic_pull_density(fib, m.motor_force, m.motor_density)[0]
    return f


def attachment_wrench(state, particle_index, candidates=None):
    """Net force and torque (about the particle center) from clamped fibers.

    candidates may supply per-fiber (X, T) aligned with state.fibers,
    overriding the stored centerlines; None entries fall back to the state.
    The moment arm always uses the stored attachment position, keeping the
    wrench linear in candidate values when a solver passes trial states.
    """
    part = state.particles[particle_index]
    F = np.zeros(3)
    L = np.zeros(3)
    for k, fib in enumerate(state.fibers):
        bc = fib.bc_minus
        if bc.kind != "clampedToBody" or bc.body != particle_index:
            continue
        cand = None if candidates is None else candidates[k]
        X, T = (fib.X, fib.T) if cand is None else cand
        Fe, Le = fibers_.end_force_torque(fib, X, T)
        arm = fib.X[fib.end_index(plus=False)] - part.center
        F += Fe
        L += Le + np.cross(arm, Fe)
    return F, L


# -- cortical interaction models --------------------------------------------------

def cortical_push_update(state):
    """Attach growing plus-ends that reach the periphery; release on catastrophe.

    The attachment point is frozen at the first contact location and the
    plus-end boundary condition becomes a hinged spring toward it with the
    model stiffness; an attached fiber also picks up the model's contact
    catastrophe time.  Returns the per-fiber plus-end boundary conditions.
    """
    if state.periphery is None:
        raise ConfigurationError("cortical pushing requires a periphery")
    model = state.model("corticalPushing")
    if model is None:
        raise ConfigurationError("no cortical pushing model is configured")
    mesh = state.periphery.mesh
    out = []
    for fib in state.fibers:
        attached = fib.bc_plus.kind == "hingedToSurface"
        if attached and fib.growth_state == fibers_.SHRINKING:
            fib.bc_plus = fibers_.FreeEnd()
            fib.tau_cat = math.inf
        elif not attached and fib.growth_state == fibers_.GROWING:
            tip = fib.X[fib.end_index(plus=True)]
            _, _, _, signed_d = bodies.nearest_surface_point(mesh, tip)
            if -signed_d <= model.contact_distance:
                fib.bc_plus = fibers_.HingedToSurface(attachment=tip,
                                                      stiffness=model.stiffness)
                fib.tau_cat = model.tau_cat
        out.append(fib.bc_plus)
    return out


def cortical_pull_catastrophe(state, standoff_fraction=0.95):
    """Instant catastrophe for plus-ends reaching the periphery standoff shell.

    Under the pulling mechanism fibers never push on the cortex: any fiber
    whose plus-end crosses standoff_fraction of the local periphery radius
    switches to shrinking immediately.  Returns the switched fibers.
    """
    if state.periphery is None:
        raise ConfigurationError("cortical catastrophe requires a periphery")
    mesh = state.periphery.mesh
    switched = []
    for fib in state.fibers:
        if fib.growth_state == fibers_.SHRINKING:
            continue
        rel = fib.X[fib.end_index(plus=True)] - mesh.center
        rho = float(np.linalg.norm(rel))
        if rho == 0.0:
            continue
        th = math.acos(min(max(rel[2] / rho, -1.0), 1.0))
        if rho >= standoff_fraction * float(mesh.shape[2](th)):
            fib.growth_state = fibers_.SHRINKING
            fib.Ldot = -fib.kinetics.v_shrink
            switched.append(fib)
    return switched


# -- attachment layouts and initial conditions ------------------------------------

def _fibonacci_cap(n, cap_angle):
    """n quasi-uniform directions on the polar cap theta <= cap_angle."""
    if n == 1:
        return np.array([[0.0, 0.0, 1.0]])
    k = np.arange(n)
    z = 1.0 - (1.0 - math.cos(cap_angle)) * (k + 0.5) / n
    rho = np.sqrt(1.0 - z * z)
    phi = k * GOLDEN_ANGLE
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def mtoc_attachment_layout(pnc, n_fibers, cap_angle=math.pi / 5.0, radius_factor=1.3):
    """Attachment points and clamped tangents on two opposite polar caps.

    Half the sites go on each cap, laid out on a Fibonacci spiral, at
    radius_factor times the particle's nominal radius; tangents point
    radially outward.  The default factor leaves a clearance between the
    flexible segment and the no-slip surface, standing in for the rigid
    anchoring complex; attachments placed much closer couple the fiber
    ends to the surface strongly enough to slow the iterative solver.
    """
    if n_fibers <= 0 or n_fibers % 2:
        raise ConfigurationError("attachment layout needs a positive even fiber count")
    shape = pnc.mesh.shape
    a = float(shape[1]) if shape is not None else 0.0
    if a <= 0:
        raise ConfigurationError("particle shape has no nominal radius")
    half = n_fibers // 2
    north = _fibonacci_cap(half, cap_angle)
    south = north * np.array([1.0, 1.0, -1.0])
    dirs = np.vstack([north, south])
    points = pnc.center[None, :] + radius_factor * a * dirs
    return points, dirs


def aster_attachment_layout(pnc, n_fibers, radius_factor=1.3):
    """Attachment points and tangents covering the whole sphere.

    One Fibonacci spiral over the full solid angle, for radial asters
    whose fibers emanate isotropically.  Standoff handling matches
    mtoc_attachment_layout.
    """
    if n_fibers <= 0:
        raise ConfigurationError("attachment layout needs a positive fiber count")
    shape = pnc.mesh.shape
    a = float(shape[1]) if shape is not None else 0.0
    if a <= 0:
        raise ConfigurationError("particle shape has no nominal radius")
    dirs = _fibonacci_cap(n_fibers, math.pi)
    points = pnc.center[None, :] + radius_factor * a * dirs
    return points, dirs


def cloud_init(n_fibers, radius, length, eps, E, seed, p=16, mu=1.0, f0=1.0,
               load_direction=(0.0, 0.0, 1.0)):
    """Suspension of straight free fibers in a ball, under a uniform load.

    Centers are uniform in the ball of the given radius, orientations
    uniform on the sphere, both drawn from a generator seeded exactly by
    `seed` so the state is bit-identical across runs.
    """
    if n_fibers <= 0:
        raise ConfigurationError("need a positive number of fibers")
    if radius <= 0 or length <= 0:
        raise ConfigurationError("cloud radius and fiber length must be positive")
    rng = np.random.default_rng(seed)
    fibs = []
    for _ in range(n_fibers):
        cdir = rng.standard_normal(3)
        cdir /= np.linalg.norm(cdir)
        center = radius * rng.random() ** (1.0 / 3.0) * cdir
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        fibs.append(fibers_.straight_fiber(p, center - 0.5 * length * d, d, length,
                                           eps=eps, E=E))
    return SystemState(fibs, mu=mu, seed=seed,
                       force_models=[UniformBodyForce(f0, load_direction)])


# -- complementary velocities -----------------------------------------------------

@dataclass
class ComplementaryVelocities:
    """Induced velocities split by evaluation family."""

    periphery: object
    particles: list
    fibers: list


def _inside_star_surface(mesh, points):
    """Radial containment test against the shape profile R(theta)."""
    pts = np.atleast_2d(points) - mesh.center
    rho = np.linalg.norm(pts, axis=1)
    safe = np.where(rho > 0, rho, 1.0)
    th = np.arccos(np.clip(np.where(rho > 0, pts[:, 2] / safe, 1.0), -1.0, 1.0))
    return rho < np.asarray(mesh.shape[2](th), dtype=float)


class InteractionCache:
    """Frozen-geometry structures for complementary_velocities.

    Holds the concatenated target/source layouts with group ids (a target
    never sees sources of its own group) and, for every target inside a
    source's near shell, the correction map
    near-field weights minus plain quadrature weights, to be applied on top
    of the global sums.  Rebuild whenever any constituent moves.
    """

    def __init__(self, state, include_doublet=True):
        self.include_doublet = include_doublet
        nf = len(state.fibers)
        np_ = len(state.particles)

        blocks = []
        groups = []
        self.particle_slices = []
        offset = 0
        for i, part in enumerate(state.particles):
            n = part.mesh.n_nodes
            blocks.append(part.mesh.nodes)
            groups.append(np.full(n, nf + i, dtype=np.int64))
            self.particle_slices.append(slice(offset, offset + n))
            offset += n
        if state.periphery is not None:
            n = state.periphery.mesh.n_nodes
            blocks.append(state.periphery.mesh.nodes)
            groups.append(np.full(n, nf + np_, dtype=np.int64))
            self.periphery_slice = slice(offset, offset + n)
            offset += n
        else:
            self.periphery_slice = None
        self.fiber_slices = []
        for m, fib in enumerate(state.fibers):
            n = fib.n_nodes
            blocks.append(fib.X)
            groups.append(np.full(n, m, dtype=np.int64))
            self.fiber_slices.append(slice(offset, offset + n))
            offset += n
        self.targets = np.vstack(blocks) if blocks else np.zeros((0, 3))
        self.target_groups = np.concatenate(groups) if groups else np.zeros(0, dtype=np.int64)
        self.n_targets = offset

        self.fiber_sources = (np.vstack([f.X for f in state.fibers])
                              if nf else np.zeros((0, 3)))
        self.fiber_groups = (np.concatenate(
            [np.full(f.n_nodes, m, dtype=np.int64) for m, f in enumerate(state.fibers)])
            if nf else np.zeros(0, dtype=np.int64))
        self.fiber_weights = [f.node_weights() for f in state.fibers]
        self.doublet_coeffs = [(f.eps * f.L) ** 2 / 2.0 for f in state.fibers]

        self.surfaces = []
        for i, part in enumerate(state.particles):
            self.surfaces.append((part.mesh, nf + i, False))
        if state.periphery is not None:
            self.surfaces.append((state.periphery.mesh, nf + np_, True))
        if self.surfaces:
            self.surface_sources = np.vstack([m.nodes for m, _, _ in self.surfaces])
            self.surface_normals = np.vstack([m.normals for m, _, _ in self.surfaces])
            self.surface_groups = np.concatenate(
                [np.full(m.n_nodes, g, dtype=np.int64) for m, g, _ in self.surfaces])
        else:
            self.surface_sources = np.zeros((0, 3))
            self.surface_normals = np.zeros((0, 3))
            self.surface_groups = np.zeros(0, dtype=np.int64)

        self.near_fiber = []
        self.near_surface = []
        self._find_fiber_pairs(state)
        self._find_surface_pairs(state)

    def _find_fiber_pairs(self, state):
        mu = state.mu
        for l, fib in enumerate(state.fibers):
            shell = fibers_.NEAR_SHELL_FACTOR * fib.L / fib.p
            c = fib.X.mean(axis=0)
            bound = float(np.linalg.norm(fib.X - c, axis=1).max()) + shell
            rel = self.targets - c
            cand = np.nonzero((self.target_groups != l)
                              & ((rel * rel).sum(axis=1) <= bound * bound))[0]
            if cand.size == 0:
                continue
            d = self.targets[cand, None, :] - fib.X[None, :, :]
            d2 = (d * d).sum(axis=2).min(axis=1)
            for t in cand[d2 < shell * shell]:
                try:
                    Wn = fibers_.near_fiber_weights(fib, self.targets[t], mu,
                                                    include_doublet=self.include_doublet)
                except fibers_.InsideFiberError as err:
                    raise OverlapError(
                        f"target node overlaps fiber {l}: {err}") from err
                Wp = fibers_.plain_fiber_weights(fib, self.targets[t], mu,
                                                 include_doublet=self.include_doublet)
                self.near_fiber.append((int(t), l, Wn - Wp))

    def _find_surface_pairs(self, state):
        mu = state.mu
        for si, (mesh, group, is_periphery) in enumerate(self.surfaces):
            others = self.target_groups != group
            if mesh.shape is not None:
                inside = _inside_star_surface(mesh, self.targets)
                if is_periphery:
                    if np.any(others & ~inside):
                        raise OverlapError("a target lies outside the confining periphery")
                elif np.any(others & inside):
                    raise OverlapError("a target lies inside a rigid particle")
            shell = bodies.NEAR_SHELL_FACTOR * mesh.h
            rel = np.linalg.norm(self.targets - mesh.center, axis=1)
            rho_nodes = np.linalg.norm(mesh.nodes - mesh.center, axis=1)
            band = (others & (rel >= rho_nodes.min() - shell)
                    & (rel <= rho_nodes.max() + shell))
            cand = np.nonzero(band)[0]
            if cand.size == 0:
                continue
            d = self.targets[cand, None, :] - mesh.nodes[None, :, :]
            d2 = (d * d).sum(axis=2).min(axis=1)
            for t in cand[d2 < shell * shell]:
                Wn = bodies.near_surface_weights(mesh, self.targets[t], mu,
                                                 interior_jump=is_periphery)
                Wp = bodies.plain_surface_weights(mesh, self.targets[t], mu)
                self.near_surface.append((int(t), si, Wn - Wp))

    def split(self, u):
        """Break a stacked velocity array into the evaluation families."""
        per = u[self.periphery_slice] if self.periphery_slice is not None else None
        parts = [u[s] for s in self.particle_slices]
        fl = [u[s] for s in self.fiber_slices]
        return ComplementaryVelocities(periphery=per, particles=parts, fibers=fl)


def complementary_velocities(state, periphery_density=None, particle_densities=None,
                             fiber_forces=None, particle_wrenches=None,
                             backend=None, cache=None, include_doublet=True):
    """Flow induced at every constituent's nodes by all the others.

    Candidate densities and forces default to the stored state: the
    periphery and particle double-layer densities, the fibers' elastic
    force density plus active external loads, and per-particle wrenches
    combining the external wrench with the clamped fibers' end loads.
    Self-interactions are excluded throughout; targets inside another
    constituent raise OverlapError.
    """
    if backend is None:
        backend = DirectSummation()
    if cache is None:
        cache = InteractionCache(state, include_doublet=include_doublet)
    mu = state.mu

    if fiber_forces is None:
        fiber_forces = [fibers_.elastic_force_density(f, f.X, f.T)
                        + external_force_density(state, f) for f in state.fibers]
    if particle_densities is None:
        particle_densities = [p.q for p in state.particles]
    if periphery_density is None and state.periphery is not None:
        periphery_density = state.periphery.q
    if particle_wrenches is None:
        particle_wrenches = []
        for i, part in enumerate(state.particles):
            Fa, La = attachment_wrench(state, i)
            particle_wrenches.append((part.F_ext + Fa, part.L_ext + La))

    u = np.zeros((cache.n_targets, 3))

    if state.fibers:
        strengths = np.vstack([w[:, None] * np.asarray(f, dtype=float)
                               for w, f in zip(cache.fiber_weights, fiber_forces)])
        u += backend.stokeslet(cache.fiber_sources, cache.fiber_groups, strengths,
                               cache.targets, cache.target_groups, mu)
        if cache.include_doublet:
            dbl = np.vstack([c * w[:, None] * np.asarray(f, dtype=float)
                             for c, w, f in zip(cache.doublet_coeffs,
                                                cache.fiber_weights, fiber_forces)])
            out, bad = kernels.doublet_sum(cache.targets, cache.target_groups,
                                           cache.fiber_sources, cache.fiber_groups,
                                           dbl, 1.0 / (8.0 * np.pi * mu))
            if bad:
                raise kernels.SingularEvaluationError(
                    "a target coincides with another fiber's node")
            u += out

    if cache.surfaces:
        qw_blocks = []
        for j, (mesh, _, is_periphery) in enumerate(cache.surfaces):
            q = np.asarray(periphery_density if is_periphery else particle_densities[j],
                           dtype=float)
            qw_blocks.append(q * mesh.weights[:, None])
        qw = np.vstack(qw_blocks)
        out, bad = kernels.stresslet_sum(cache.targets, cache.target_groups,
                                         cache.surface_sources, cache.surface_groups,
                                         cache.surface_normals, qw,
                                         -3.0 / (4.0 * np.pi * mu))
        if bad:
            raise kernels.SingularEvaluationError(
                "a target coincides with another surface's node")
        u += out

    pref = 1.0 / (8.0 * np.pi * mu)
    for i, part in enumerate(state.particles):
        F, L = particle_wrenches[i]
        F = np.asarray(F, dtype=float)
        L = np.asarray(L, dtype=float)
        mask = cache.target_groups != len(state.fibers) + i
        r = cache.targets[mask] - part.center
        d = np.linalg.norm(r, axis=1)
        if np.any(d < kernels.MIN_SEPARATION):
            raise kernels.SingularEvaluationError("target at a particle center")
        u[mask] += pref * (F[None, :] / d[:, None] + ((r @ F) / d**3)[:, None] * r)
        u[mask] += pref * np.cross(L[None, :], r) / (d**3)[:, None]

    for t, l, W in cache.near_fiber:
        u[t] += W @ np.asarray(fiber_forces[l], dtype=float).ravel()
    for t, si, W in cache.near_surface:
        mesh, _, is_periphery = cache.surfaces[si]
        q = periphery_density if is_periphery else particle_densities[si]
        u[t] += W @ np.asarray(q, dtype=float).ravel()

    return cache.split(u)
