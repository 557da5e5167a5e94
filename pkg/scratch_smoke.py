import numpy as np
from slenderflow import solver as sv
from slenderflow.body import Periphery, RigidParticle, make_surface, sphere_shape
from slenderflow.fiber import ClampedToBody, straight_fiber
from slenderflow.system import SystemState, UniformBodyForce, aster_attachment_layout


def rest_check(p, dt):
    st = SystemState([straight_fiber(p, (0, 0, -1.0), (0, 0, 1.0), 2.0)])
    op, rhs = sv.assemble_step_operator(st, dt)
    pre = sv.Preconditioner(op)
    x, iters, hist = sv.gmres_solve(op, pre, rhs)
    parts = op.layout.unpack(x)
    f = st.fibers[0]
    return np.abs(parts.fiber_X[0] - f.X).max(), np.abs(parts.fiber_T[0]).max()


def prec_err(p, L, E, dt):
    st = SystemState([
        straight_fiber(p, (0, 0, 0), (0, 0, 1.0), L, E=E),
        straight_fiber(p, (4.0, 0, 0), (1.0, 1.0, 1.0), L, E=E),
    ])
    op, rhs = sv.assemble_step_operator(st, dt)
    pre = sv.Preconditioner(op)
    A = op.materialize()
    rng = np.random.default_rng(7)
    errs = []
    for _ in range(4):
        w = rng.standard_normal(op.layout.size)
        v = A @ w
        out = pre.apply(v)
        for m in range(2):
            b = op.layout.fiber_block[m]
            errs.append(np.abs(out[b] - w[b]).max() / np.abs(w[b]).max())
    return max(errs)


def loaded_fiber_iters(p, dt):
    st = SystemState([straight_fiber(p, (0, 0, -1.0), (0, 0, 1.0), 2.0)],
                     force_models=[UniformBodyForce(0.5, (1.0, 0.0, 0.0))])
    op, rhs = sv.assemble_step_operator(st, dt)
    pre = sv.Preconditioner(op)
    x, iters, hist = sv.gmres_solve(op, pre, rhs)
    return iters, hist[-1]


def aster(n_f, p, dt, standoff=1.3):
    pnc = RigidParticle(make_surface(sphere_shape(1.0), (8, 8)))
    pnc.F_ext = np.array([0.0, 0.0, 0.125])
    per = Periphery(make_surface(sphere_shape(6.0), (12, 12)))
    points, dirs = aster_attachment_layout(pnc, n_f, radius_factor=standoff)
    fibs = []
    for site, d in zip(points, dirs):
        f = straight_fiber(p, site, d, 2.0)
        f.bc_minus = ClampedToBody(0, attach_point=site, tangent=d)
        fibs.append(f)
    st = SystemState(fibs, [pnc], periphery=per)
    op, rhs = sv.assemble_step_operator(st, dt)
    pre = sv.Preconditioner(op)
    x, iters, hist = sv.gmres_solve(op, pre, rhs)
    return iters, hist[-1]


def bent_drift(p, dt, nsteps=6):
    f = straight_fiber(p, (0, 0, -1.0), (0, 0, 1.0), 2.0)
    alpha = f.grid.nodes
    f.X = f.X + np.stack([0.08 * np.cos(1.5 * np.pi * alpha),
                          np.zeros(p + 1), np.zeros(p + 1)], axis=1)
    f.refresh_geometry()
    st = SystemState([f])
    drifts = []
    for _ in range(nsteps):
        L0 = (np.linalg.norm(f.grid.D @ f.X, axis=1) * f.grid.weights).sum()
        sv.backward_euler_step(st, dt)
        L1 = (np.linalg.norm(f.grid.D @ f.X, axis=1) * f.grid.weights).sum()
        drifts.append(abs(L1 - L0) / 2.0)
    return drifts


print("p12 rest: dX %.2e T %.2e" % rest_check(12, 0.0025))
print("p31 rest: dX %.2e T %.2e" % rest_check(31, 0.0025))
print("prec err p8 L4 E1 dt.5 : %.1e" % prec_err(8, 4.0, 1.0, 0.5))
print("prec err p16 L2 E10 dt.0025: %.1e" % prec_err(16, 2.0, 10.0, 0.0025))
print("prec err p31 L2 E10 dt.0025: %.1e" % prec_err(31, 2.0, 10.0, 0.0025))
it, res = loaded_fiber_iters(16, 0.0025)
print("single fiber p16 iters:", it, "res %.1e" % res)
it, res = aster(64, 16, 0.0025)
print("64f aster iters:", it, "res %.1e" % res)
it, res = aster(16, 31, 0.0025)
print("16f p31 aster iters:", it, "res %.1e" % res)
print("bent drift:", ["%.1e" % d for d in bent_drift(16, 0.01)])
