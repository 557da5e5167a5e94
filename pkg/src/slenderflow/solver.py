"""Implicit coupled stepping: operator assembly, preconditioning, GMRES.

One backward-Euler step solves a single linear system whose unknowns are
the rigid-particle velocities, all layer densities, and every fiber's
candidate centerline and tension.  Geometry (tangents, arclength metrics,
quadrature weights, near-field maps) is frozen at the current state, so
each block row is linear in the unknowns; forces, densities, and the
hydrodynamic coupling between constituents are treated implicitly, which
is what removes the bending-stiffness and interaction time-step limits.

The operator keeps per-fiber self-blocks as dense matrices (boundary rows
already substituted) because the preconditioner inverts them exactly;
every cross coupling is applied matrix-free through
complementary_velocities on the step's frozen interaction cache.
"""

import logging
import math

import numpy as np
from scipy.linalg import LinAlgError, lu_factor, lu_solve

from . import body as bodies
from . import fiber as fibers_
from . import kernels
from .system import (
    ConfigurationError,
    DirectSummation,
    InteractionCache,
    attachment_wrench,
    complementary_velocities,
    cortical_pull_catastrophe,
    cortical_push_update,
    external_force_density,
)

LOG = logging.getLogger("slenderflow.solver")


class NonconvergenceError(RuntimeError):
    """GMRES ran out of iterations; carries the best iterate found."""

    def __init__(self, message, best=None, iterations=0, residuals=()):
        super().__init__(message)
        self.best = best
        self.iterations = iterations
        self.residuals = list(residuals)


class FactorizationError(RuntimeError):
    """A fiber self-block could not be inverted."""


class GmresParams:
    """Iteration controls: relative tolerance, restart length, iteration cap."""

    def __init__(self, tolerance=1e-5, restart=60, max_iterations=500):
        if not 0.0 < tolerance < 1.0:
            raise ConfigurationError("GMRES tolerance must lie in (0, 1)")
        if restart < 1 or max_iterations < 1:
            raise ConfigurationError("restart length and iteration cap must be positive")
        self.tolerance = float(tolerance)
        self.restart = int(restart)
        self.max_iterations = int(max_iterations)


class StepLayout:
    """Index map of the stacked step unknowns.

    Order: per particle (U, omega, q1), then the periphery density q0,
    then per fiber (X, T).  Rows of the step system use the same
    partitioning, so the operator is square.
    """

    def __init__(self, state):
        off = 0
        self.U = []
        self.omega = []
        self.q1 = []
        for part in state.particles:
            self.U.append(slice(off, off + 3))
            self.omega.append(slice(off + 3, off + 6))
            n = part.mesh.n_nodes
            self.q1.append(slice(off + 6, off + 6 + 3 * n))
            off += 6 + 3 * n
        self.q0 = None
        if state.periphery is not None:
            n0 = state.periphery.mesh.n_nodes
            self.q0 = slice(off, off + 3 * n0)
            off += 3 * n0
        self.X = []
        self.T = []
        self.fiber_block = []
        for fib in state.fibers:
            n = fib.n_nodes
            self.X.append(slice(off, off + 3 * n))
            self.T.append(slice(off + 3 * n, off + 4 * n))
            self.fiber_block.append(slice(off, off + 4 * n))
            off += 4 * n
        self.size = off

    def unpack(self, u):
        """Views of the stacked vector as per-constituent arrays."""
        U = [u[s] for s in self.U]
        omega = [u[s] for s in self.omega]
        q1 = [u[s].reshape(-1, 3) for s in self.q1]
        q0 = u[self.q0].reshape(-1, 3) if self.q0 is not None else None
        X = [u[s].reshape(-1, 3) for s in self.X]
        T = [u[s] for s in self.T]
        return _Parts(U, omega, q1, q0, X, T)


class _Parts:
    __slots__ = ("U", "omega", "q1", "q0", "X", "T")

    def __init__(self, U, omega, q1, q0, X, T):
        self.U = U
        self.omega = omega
        self.q1 = q1
        self.q0 = q0
        self.X = X
        self.T = T


def _wrench_flow(center, F, L, targets, mu):
    """Stokeslet plus rotlet of a wrench applied at a point."""
    r = targets - center
    d = np.linalg.norm(r, axis=1)
    if np.any(d < kernels.MIN_SEPARATION):
        raise kernels.SingularEvaluationError("evaluation point at the wrench origin")
    pref = 1.0 / (8.0 * np.pi * mu)
    u = pref * (F[None, :] / d[:, None] + ((r @ F) / d**3)[:, None] * r)
    u += pref * np.cross(L[None, :], r) / (d**3)[:, None]
    return u


def _fiber_rows(fib, Xc, Tc, f_extra, u_bar, bk, dt, mu, constants):
    """4(p+1) residual rows of one fiber block.

    Velocity-match rows at interior nodes, inextensibility rows, and the
    14 boundary rows in their replacement slots (position rows on the two
    nodes nearest each end, tension rows at the end nodes).  f_extra
    carries the frozen external force density; u_bar the complementary
    velocity at the fiber nodes.  With constants=False only the part
    linear in the candidates survives.

    The inextensibility rows project the end-of-step metric on the
    current one with the candidate position written through the flow,
    X + dt*((M + K_delta)f + u_bar + reparam), rather than through X+
    itself.  Both expressions agree wherever the velocity rows hold, so
    the solved step preserves the metric exactly like the pure position
    form; writing the flow keeps the tension coupled to the constraint
    at the four boundary-replaced nodes as well, where the position form
    loses rank for perfectly straight fibers (tension there drives
    purely tangential flow that the interior rows cannot see).  The rows
    are stated in velocity units (the metric condition divided by dt) so
    the tension block enters at order one.
    """
    n = fib.n_nodes
    f = fibers_.elastic_force_density(fib, Xc, Tc)
    if f_extra is not None:
        f = f + f_extra
    flow = fibers_.local_mobility_apply(fib, f, mu) \
        + fibers_.nonlocal_Kdelta_apply(fib, f, mu) + u_bar
    vel = Xc / dt - flow
    if constants:
        vel -= fib.X / dt + fibers_.reparam_velocity(fib)
    Xa = fib.tangents * fib.s_alpha[:, None]
    w = flow
    if constants:
        w = w + fib.X / dt + fibers_.reparam_velocity(fib)
    inext = ((fib.grid.D @ w) * Xa).sum(axis=1)
    if constants:
        inext -= (1.0 / dt + fib.Ldot / fib.L) * (Xa * Xa).sum(axis=1)
    rows = fibers_.bc_residuals(fib, Xc, Tc, body_kinematics=bk, mu=mu,
                                u_bar=u_bar[fib.end_index(plus=False)],
                                homogeneous=not constants)
    vel[0] = rows[0:3]
    vel[1] = rows[3:6]
    vel[n - 1] = rows[6:9]
    vel[n - 2] = rows[9:12]
    inext[0] = rows[12]
    inext[n - 1] = rows[13]
    return np.concatenate([vel.ravel(), inext])


class BlockOperator:
    """Linear action of the implicit step system on the stacked unknowns.

    With implicit_coupling=False the complementary flow is dropped from
    the operator and later folded into the right-hand side from current
    data; that diagnostic mode reproduces an explicitly coupled scheme
    and is only useful for measuring how much the implicit coupling buys.
    """

    def __init__(self, state, dt, mu=None, backend=None, cache=None,
                 implicit_coupling=True):
        if dt <= 0:
            raise ConfigurationError("time step must be positive")
        self.state = state
        self.dt = float(dt)
        self.mu = state.mu if mu is None else float(mu)
        if self.mu <= 0:
            raise ConfigurationError("viscosity must be positive")
        self.backend = backend if backend is not None else DirectSummation()
        self.layout = StepLayout(state)
        self.cache = cache if cache is not None else InteractionCache(state)
        self.implicit_coupling = bool(implicit_coupling)
        self._f_ext = [external_force_density(state, fib) for fib in state.fibers]
        self.fiber_blocks = [self._fiber_self_block(m)
                             for m in range(len(state.fibers))]

    @property
    def shape(self):
        return (self.layout.size, self.layout.size)

    def apply(self, u):
        """The matrix-vector product A @ u, strictly linear."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.layout.size,):
            raise ValueError(f"expected a vector of length {self.layout.size}")
        return self._rows(self.layout.unpack(u), constants=False)

    def rhs(self):
        """Right-hand side collecting every candidate-independent term."""
        zero = self.layout.unpack(np.zeros(self.layout.size))
        return -self._rows(zero, constants=True)

    def materialize(self):
        """Dense matrix built column by column; small systems only."""
        n = self.layout.size
        A = np.empty((n, n))
        e = np.zeros(n)
        for j in range(n):
            e[j] = 1.0
            A[:, j] = self.apply(e)
            e[j] = 0.0
        return A

    # -- assembly internals -------------------------------------------------

    def _body_kinematics(self, fib, parts):
        bc = fib.bc_minus
        if bc.kind != "clampedToBody":
            return None
        part = self.state.particles[bc.body]
        return dict(U=parts.U[bc.body], omega=parts.omega[bc.body],
                    center=part.center, dt=self.dt)

    def _fiber_self_block(self, m):
        """Dense 4n x 4n block, assembled from the fiber's frozen operators.

        Same rows as _fiber_rows restricted to the fiber's own unknowns
        (boundary slots included); built algebraically because probing
        4n columns per fiber dominates the step cost otherwise.
        """
        fib = self.state.fibers[m]
        n = fib.n_nodes
        dt = self.dt
        bk = None
        if fib.bc_minus.kind == "clampedToBody":
            part = self.state.particles[fib.bc_minus.body]
            bk = dict(U=np.zeros(3), omega=np.zeros(3), center=part.center,
                      dt=dt)

        MK = fib.mobility_matrix(self.mu) + fib.kdelta_matrix(self.mu)
        FX, FT = fib.elastic_operators()
        Xa = fib.tangents * fib.s_alpha[:, None]
        S = np.zeros((n, 3 * n))
        for c in range(3):
            S[:, c::3] = fib.grid.D * Xa[:, c][:, None]

        A = np.zeros((4 * n, 4 * n))
        A[:3 * n, :3 * n] = np.eye(3 * n) / dt - MK @ FX
        A[:3 * n, 3 * n:] = -MK @ FT
        A[3 * n:, :3 * n] = S @ (MK @ FX)
        A[3 * n:, 3 * n:] = S @ (MK @ FT)

        bc_cols = np.empty((14, 4 * n))
        e = np.zeros(4 * n)
        zero_bar = np.zeros(3)
        for j in range(4 * n):
            e[j] = 1.0
            bc_cols[:, j] = fibers_.bc_residuals(
                fib, e[:3 * n].reshape(n, 3), e[3 * n:], body_kinematics=bk,
                mu=self.mu, u_bar=zero_bar, homogeneous=True)
            e[j] = 0.0
        slots = [slice(0, 3), slice(3, 6), slice(3 * (n - 1), 3 * n),
                 slice(3 * (n - 2), 3 * (n - 1))]
        for r, sl in enumerate(slots):
            A[sl] = bc_cols[3 * r:3 * r + 3]
        A[3 * n] = bc_cols[12]
        A[4 * n - 1] = bc_cols[13]
        return A

    def _wrenches(self, parts, constants):
        out = []
        cand = list(zip(parts.X, parts.T))
        for i, part in enumerate(self.state.particles):
            Fa, La = attachment_wrench(self.state, i, candidates=cand)
            if constants:
                Fa = Fa + part.F_ext
                La = La + part.L_ext
            out.append((Fa, La))
        return out

    def _rows(self, parts, constants):
        st = self.state
        mu = self.mu
        lay = self.layout
        out = np.zeros(lay.size)

        forces = []
        for m, fib in enumerate(st.fibers):
            f = fibers_.elastic_force_density(fib, parts.X[m], parts.T[m])
            if constants:
                f = f + self._f_ext[m]
            forces.append(f)
        wrenches = self._wrenches(parts, constants)

        if self.implicit_coupling:
            ubar = complementary_velocities(
                st, periphery_density=parts.q0, particle_densities=parts.q1,
                fiber_forces=forces, particle_wrenches=wrenches,
                backend=self.backend, cache=self.cache)
        elif constants:
            ubar = complementary_velocities(st, backend=self.backend,
                                            cache=self.cache)
        else:
            ubar = None

        for i, part in enumerate(st.particles):
            mesh = part.mesh
            u_avg, om_avg = bodies.rigid_constraint_averages(part, parts.q1[i])
            out[lay.U[i]] = parts.U[i] - u_avg / mu
            out[lay.omega[i]] = parts.omega[i] - om_avg / mu
            rows = bodies.double_layer_onsurface(mesh, parts.q1[i], mu)
            F, L = wrenches[i]
            rows += _wrench_flow(part.center, np.asarray(F, dtype=float),
                                 np.asarray(L, dtype=float), mesh.nodes, mu)
            if ubar is not None:
                rows += ubar.particles[i]
            arm = mesh.nodes - part.center
            rows -= parts.U[i][None, :] + np.cross(parts.omega[i][None, :], arm)
            out[lay.q1[i]] = rows.ravel()

        if st.periphery is not None:
            mesh = st.periphery.mesh
            rows = bodies.double_layer_onsurface(mesh, parts.q0, mu)
            rows += parts.q0 / mu
            scale = 1.0 / (mu * mesh.area)
            rows += scale * bodies.nullspace_operator(mesh, parts.q0)
            if ubar is not None:
                rows += ubar.periphery
            out[lay.q0] = rows.ravel()

        for m, fib in enumerate(st.fibers):
            u_bar_m = ubar.fibers[m] if ubar is not None \
                else np.zeros((fib.n_nodes, 3))
            out[lay.fiber_block[m]] = _fiber_rows(
                fib, parts.X[m], parts.T[m],
                self._f_ext[m] if constants else None, u_bar_m,
                self._body_kinematics(fib, parts), self.dt, mu, constants)
        return out


def assemble_step_operator(state, dt, mu=None, backend=None, cache=None,
                           implicit_coupling=True):
    """Frozen-geometry step operator and its right-hand side."""
    op = BlockOperator(state, dt, mu=mu, backend=backend, cache=cache,
                       implicit_coupling=implicit_coupling)
    return op, op.rhs()


class Preconditioner:
    """Block Jacobi: exact fiber-block inverses, diagonal on surface rows.

    Fiber blocks are row/column equilibrated (max-abs) before the LU:
    their raw entries span 1/dt on the velocity rows to dt*E*p^10-ish in
    the constraint rows' bending coupling, which is almost entirely
    artificial scaling; equilibration brings the condition number from
    ~1e14 down to ~1e8 at p = 31 and with it the accuracy of the block
    solves.
    """

    def __init__(self, op):
        self.layout = op.layout
        self.fiber_lu = []
        for m, A in enumerate(op.fiber_blocks):
            if not np.all(np.isfinite(A)):
                raise FactorizationError(f"fiber {m} self-block is not finite")
            r = np.abs(A).max(axis=1)
            if r.min() == 0.0:
                raise FactorizationError(f"fiber {m} self-block is singular")
            scaled = A / r[:, None]
            c = np.abs(scaled).max(axis=0)
            scaled /= c[None, :]
            try:
                lu = lu_factor(scaled)
            except LinAlgError as err:
                raise FactorizationError(f"fiber {m} self-block is singular") from err
            if np.abs(np.diag(lu[0])).min() == 0.0:
                raise FactorizationError(f"fiber {m} self-block is singular")
            self.fiber_lu.append((lu, r, c))

        mu = op.mu
        diag = np.ones(op.layout.size)
        pref = -3.0 / (4.0 * np.pi * mu)
        for i, part in enumerate(op.state.particles):
            mesh = part.mesh
            rs = kernels.stresslet_rowsum(mesh.nodes, mesh.normals,
                                          mesh.weights, pref)
            diag[op.layout.q1[i]] = -rs[:, (0, 1, 2), (0, 1, 2)].ravel()
        if op.state.periphery is not None:
            mesh = op.state.periphery.mesh
            rs = kernels.stresslet_rowsum(mesh.nodes, mesh.normals,
                                          mesh.weights, pref)
            d = -rs[:, (0, 1, 2), (0, 1, 2)] + 1.0 / mu
            d += (mesh.normals**2) * mesh.weights[:, None] / (mu * mesh.area)
            diag[op.layout.q0] = d.ravel()
        if np.any(diag == 0.0):
            raise FactorizationError("zero diagonal entry in a surface block")
        self.diag = diag

    def apply(self, v):
        out = np.asarray(v, dtype=float) / self.diag
        for (lu, r, c), block in zip(self.fiber_lu, self.layout.fiber_block):
            out[block] = lu_solve(lu, v[block] / r) / c
        return out


def _as_apply(obj):
    if obj is None:
        return lambda v: v
    if hasattr(obj, "apply"):
        return obj.apply
    if isinstance(obj, np.ndarray):
        return lambda v: obj @ v
    if callable(obj):
        return obj
    raise TypeError("operator must expose .apply, be a matrix, or be callable")


def gmres_solve(operator, preconditioner, rhs, params=None, x0=None):
    """Left-preconditioned restarted GMRES.

    Returns (solution, iterations, residual history), where the history
    holds the relative preconditioned residual after each iteration.
    Raises NonconvergenceError with the best iterate when the iteration
    cap is reached.  Written out here (rather than deferring to a library
    routine) so the iteration accounting and the preconditioning side
    match the reported diagnostics exactly.
    """
    if params is None:
        params = GmresParams()
    apply_a = _as_apply(operator)
    apply_m = _as_apply(preconditioner)
    b = apply_m(np.asarray(rhs, dtype=float))
    n = b.shape[0]
    beta0 = float(np.linalg.norm(b))
    if beta0 == 0.0:
        return np.zeros(n), 0, [0.0]

    warm = x0 is not None
    x = np.array(x0, dtype=float) if warm else np.zeros(n)
    history = []
    iters = 0
    while True:
        r = b - apply_m(apply_a(x)) if iters or warm else b
        beta = float(np.linalg.norm(r))
        if beta / beta0 <= params.tolerance:
            return x, iters, history or [beta / beta0]
        V = np.empty((params.restart + 1, n))
        V[0] = r / beta
        H = np.zeros((params.restart + 1, params.restart))
        cs = np.zeros(params.restart)
        sn = np.zeros(params.restart)
        g = np.zeros(params.restart + 1)
        g[0] = beta
        k = 0
        while k < params.restart and iters < params.max_iterations:
            w = apply_m(apply_a(V[k]))
            wnorm = float(np.linalg.norm(w))
            for j in range(k + 1):
                H[j, k] = V[j] @ w
                w -= H[j, k] * V[j]
            H[k + 1, k] = float(np.linalg.norm(w))
            for j in range(k):
                tmp = cs[j] * H[j, k] + sn[j] * H[j + 1, k]
                H[j + 1, k] = -sn[j] * H[j, k] + cs[j] * H[j + 1, k]
                H[j, k] = tmp
            denom = math.hypot(H[k, k], H[k + 1, k])
            cs[k] = H[k, k] / denom if denom else 1.0
            sn[k] = H[k + 1, k] / denom if denom else 0.0
            H[k, k] = denom
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            iters += 1
            rel = abs(g[k + 1]) / beta0
            history.append(rel)
            breakdown = H[k + 1, k] <= 1e-12 * max(wnorm, 1e-300)
            if not breakdown:
                V[k + 1] = w / H[k + 1, k]
            k += 1
            if rel <= params.tolerance or breakdown:
                break
        y = np.linalg.solve(np.triu(H[:k, :k]), g[:k]) if k else np.zeros(0)
        x = x + V[:k].T @ y
        rel = history[-1] if history else 0.0
        if rel <= params.tolerance:
            return x, iters, history
        if iters >= params.max_iterations:
            raise NonconvergenceError(
                f"GMRES did not reach {params.tolerance:g} within "
                f"{params.max_iterations} iterations (residual {rel:.3e})",
                best=x, iterations=iters, residuals=history)


def _rotation_is_representable(part, omega, dt):
    """Mesh rotation is a relabeling for spheres, so nothing moves; any
    other shape would invalidate its polar parametrization."""
    if float(np.linalg.norm(omega)) * dt < 1e-14:
        return True
    shape = part.mesh.shape
    return shape is not None and shape[0] == "sphere"


def backward_euler_step(state, dt, params=None, mu=None, backend=None,
                        dt_min=None, implicit_coupling=True):
    """Advance the state by one implicit step, halving dt on nonconvergence.

    The state is only mutated once a solve succeeds; after the geometry
    update the polymerization kinetics and the configured contact models
    run to prepare the next step.  Telemetry goes to the
    slenderflow.solver logger as key=value lines.
    """
    if dt <= 0:
        raise ConfigurationError("time step must be positive")
    if dt_min is None:
        dt_min = dt / 64.0
    attempt = float(dt)
    cache = InteractionCache(state)
    while True:
        op, rhs = assemble_step_operator(state, attempt, mu=mu, backend=backend,
                                         cache=cache,
                                         implicit_coupling=implicit_coupling)
        prec = Preconditioner(op)
        try:
            sol, iters, history = gmres_solve(op, prec, rhs, params)
            break
        except NonconvergenceError as err:
            LOG.warning("step_rejected time=%.9g dt=%.3e residual=%.3e",
                        state.time, attempt, err.residuals[-1])
            if attempt / 2.0 < dt_min:
                raise
            attempt /= 2.0

    parts = op.layout.unpack(sol)
    for i, part in enumerate(state.particles):
        if not _rotation_is_representable(part, parts.omega[i], attempt):
            raise ConfigurationError(
                "rotation of a non-spherical particle is not supported")
        part.U = parts.U[i].copy()
        part.omega = parts.omega[i].copy()
        part.q = parts.q1[i].copy()
        part.translate(attempt * part.U)
    if state.periphery is not None:
        state.periphery.q = parts.q0.copy()
    for m, fib in enumerate(state.fibers):
        fib.X = parts.X[m].copy()
        fib.T = parts.T[m].copy()
        fib.refresh_geometry()
    state.time += attempt

    for fib in state.fibers:
        if fib.growth_state == fibers_.STALLED:
            continue
        load = np.zeros(3)
        if fib.bc_plus.kind == "hingedToSurface":
            load = fib.bc_plus.stiffness * (fib.X[0] - fib.bc_plus.attachment)
        kin = fib.kinetics
        fib.Ldot = fibers_.growth_rate(fib, load, kin.v_grow, kin.stall_force)
        rng = fib.rng if fib.rng is not None else state.rng
        fibers_.polymerization_step(fib, attempt, rng)
    if state.model("corticalPushing") is not None:
        cortical_push_update(state)
    if state.model("cytoplasmicPulling") is not None:
        cortical_pull_catastrophe(state)

    LOG.info("step time=%.9g dt=%.3e gmres_iterations=%d residual=%.3e",
             state.time, attempt, iters, history[-1] if history else 0.0)
    return state
