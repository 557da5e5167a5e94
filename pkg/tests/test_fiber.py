"""Tests for fiber mechanics, self-mobility, induced flow, and kinetics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import chebyshev as ncheb
from scipy.integrate import quad

from slenderflow import fiber as fib_mod
from slenderflow import kernels
from slenderflow.fiber import (
    ClampedToBody,
    Fiber,
    FreeEnd,
    GrowthKinetics,
    HingedToSurface,
    InsideFiberError,
    NearFieldError,
    PrescribedForceTorque,
    bc_residuals,
    catastrophe_rate,
    elastic_force_density,
    end_force_torque,
    fiber_induced_velocity,
    growth_rate,
    local_mobility_apply,
    near_fiber_eval,
    nonlocal_Kdelta_apply,
    polymerization_step,
    reparam_velocity,
    straight_fiber,
)
from slenderflow.spectral import cheb_transform


def quartic_fiber(p=24, L=2.0, c=1e-5, E=10.0):
    grid = fib_mod.shared_grid(p)
    u = (grid.nodes + 1.0) * (L / 2.0)
    X = np.stack([u, c * u**4 / L**3, np.zeros_like(u)], axis=1)
    return Fiber(X, eps=0.01, E=E)


def arc_fiber(p=24, r=1.0, span=0.5 * np.pi, E=10.0):
    grid = fib_mod.shared_grid(p)
    th = (grid.nodes + 1.0) * (span / 2.0)
    X = np.stack([r * np.cos(th), r * np.sin(th), np.zeros_like(th)], axis=1)
    return Fiber(X, eps=0.01, E=E)


class TestConstruction:
    def test_rejects_bad_aspect_ratio(self):
        X = np.zeros((9, 3))
        X[:, 0] = np.linspace(1, -1, 9)
        with pytest.raises(ValueError):
            Fiber(X, eps=0.2, E=1.0)
        with pytest.raises(ValueError):
            Fiber(X, eps=0.0, E=1.0)

    def test_geometry_cache(self):
        f = straight_fiber(16, (0, 0, 0), (0, 0, 1), 3.0)
        assert f.L == pytest.approx(3.0, rel=1e-13)
        assert np.allclose(f.tangents, [0, 0, 1])
        assert f.s[0] == pytest.approx(3.0)
        assert f.s[-1] == pytest.approx(0.0, abs=1e-14)

    def test_delta_tracks_length(self):
        f = straight_fiber(16, (0, 0, 0), (1, 0, 0), 2.0)
        assert f.delta == pytest.approx(0.02)
        f2 = straight_fiber(16, (0, 0, 0), (1, 0, 0), 2.0, delta=0.05)
        assert f2.delta == 0.05

    def test_explicit_delta_validation(self):
        f = straight_fiber(16, (0, 0, 0), (1, 0, 0), 2.0)
        with pytest.raises(ValueError):
            f.delta = -1.0


class TestElasticForce:
    def test_quartic_bending_force(self):
        L, c, E = 2.0, 1e-5, 10.0
        f = quartic_fiber(L=L, c=c, E=E)
        dens = elastic_force_density(f, f.X, np.zeros(f.n_nodes))
        expect = -24.0 * E * c / L**3
        mid = f.n_nodes // 2
        assert dens[mid, 1] == pytest.approx(expect, rel=1e-4)
        assert abs(dens[mid, 0]) < 1e-3 * abs(expect)

    def test_arc_bending_magnitude(self):
        r, E = 1.5, 4.0
        f = arc_fiber(r=r, E=E)
        dens = elastic_force_density(f, f.X, np.zeros(f.n_nodes))
        mid = f.n_nodes // 2
        assert np.linalg.norm(dens[mid]) == pytest.approx(E / r**3, rel=1e-8)
        radial = f.X[mid] / np.linalg.norm(f.X[mid])
        assert dens[mid] @ radial == pytest.approx(-E / r**3, rel=1e-8)

    def test_tension_gradient_term(self):
        f = straight_fiber(16, (0, 0, 0), (1, 0, 0), 2.0)
        T = f.s.copy()
        dens = elastic_force_density(f, f.X, T)
        assert np.allclose(dens[:, 0], 1.0, atol=1e-10)
        assert np.allclose(dens[:, 1:], 0.0, atol=1e-12)

    @given(st.integers(min_value=0, max_value=3))
    @settings(max_examples=4, deadline=None)
    def test_operator_form_matches_direct(self, seed):
        rng = np.random.default_rng(seed)
        f = straight_fiber(12, (0, 0, 0), (0, 1, 0), 1.5)
        X = f.X + 0.01 * rng.standard_normal(f.X.shape)
        T = rng.standard_normal(f.n_nodes)
        FX, FT = f.elastic_operators()
        direct = elastic_force_density(f, X, T).ravel()
        via_ops = FX @ X.ravel() + FT @ T
        assert np.allclose(direct, via_ops, atol=1e-10 * max(1.0, np.abs(direct).max()))


class TestMobility:
    def test_anisotropy_ratio(self):
        f = straight_fiber(16, (0, 0, 0), (1, 0, 0), 2.0, eps=1e-2)
        mu = 1.0
        v_par = local_mobility_apply(f, np.tile([1.0, 0, 0], (f.n_nodes, 1)), mu)
        v_perp = local_mobility_apply(f, np.tile([0, 1.0, 0], (f.n_nodes, 1)), mu)
        ratio = v_par[0, 0] / v_perp[0, 1]
        c = -math.log(1e-4 * math.e)
        assert ratio == pytest.approx(2.0 * c / (c + 2.0), rel=1e-12)
        assert ratio == pytest.approx(1.60824, abs=5e-6)

    def test_matrix_matches_apply(self):
        f = arc_fiber(p=12)
        rng = np.random.default_rng(3)
        force = rng.standard_normal((f.n_nodes, 3))
        via_matrix = (f.mobility_matrix(0.7) @ force.ravel()).reshape(-1, 3)
        assert np.allclose(via_matrix, local_mobility_apply(f, force, 0.7), atol=1e-13)

    def test_kdelta_annihilates_constants_on_straight_fiber(self):
        f = straight_fiber(24, (0, 0, 0), (1, 0, 0), 2.0)
        for force in ([1.0, 0, 0], [0, 1.0, 0], [0.3, -0.2, 0.9]):
            v = nonlocal_Kdelta_apply(f, np.tile(force, (f.n_nodes, 1)), 1.0)
            assert np.abs(v).max() < 1e-12

    def test_kdelta_linear_force_oracle(self):
        # On a straight fiber with f = s e_y the perpendicular component is
        # integral of (s'-s)/sqrt((s'-s)^2+d^2) ds' = sqrt((L-s)^2+d^2)-sqrt(s^2+d^2)
        L, mu = 2.0, 1.0
        f = straight_fiber(32, (0, 0, 0), (1, 0, 0), L, delta=0.05)
        force = np.stack([np.zeros_like(f.s), f.s, np.zeros_like(f.s)], axis=1)
        v = nonlocal_Kdelta_apply(f, force, mu) * (8.0 * np.pi * mu)
        d = f.delta
        expect = np.sqrt((L - f.s) ** 2 + d**2) - np.sqrt(f.s**2 + d**2)
        mid = f.n_nodes // 2
        assert v[mid, 1] == pytest.approx(expect[mid], abs=2e-2 * L)

    def test_kdelta_refines_with_order(self):
        L, mu = 2.0, 1.0
        errs = []
        for p in (16, 32):
            f = straight_fiber(p, (0, 0, 0), (1, 0, 0), L, delta=0.05)
            force = np.stack([np.zeros_like(f.s), f.s, np.zeros_like(f.s)], axis=1)
            v = nonlocal_Kdelta_apply(f, force, mu) * (8.0 * np.pi * mu)
            expect = np.sqrt((L - f.s) ** 2 + f.delta**2) - np.sqrt(f.s**2 + f.delta**2)
            errs.append(np.abs(v[:, 1] - expect).max())
        assert errs[1] < errs[0]

    def test_kdelta_regularization_is_first_order(self):
        f0 = arc_fiber(p=24)
        rng = np.random.default_rng(11)
        force = rng.standard_normal((f0.n_nodes, 3))
        vals = {}
        for d in (0.04, 0.02, 0.01):
            f0.delta = d
            vals[d] = nonlocal_Kdelta_apply(f0, force, 1.0)
        d1 = np.abs(vals[0.04] - vals[0.02]).max()
        d2 = np.abs(vals[0.02] - vals[0.01]).max()
        assert d2 < 0.75 * d1


def brute_induced_velocity(f, force, target, mu, include_doublet=False):
    """Adaptive-quadrature oracle for the induced-flow line integral."""
    cx = [cheb_transform(f.X[:, c]) for c in range(3)]
    cf = [cheb_transform(force[:, c]) for c in range(3)]
    csa = cheb_transform(f.s_alpha)
    coeff = (f.eps * f.L) ** 2 / 2.0

    def integrand(al, comp):
        x = np.array([ncheb.chebval(al, c) for c in cx])
        g = np.array([ncheb.chebval(al, c) for c in cf]) * ncheb.chebval(al, csa)
        r = target - x
        rr = np.linalg.norm(r)
        u = g / rr + (g @ r) * r / rr**3
        if include_doublet:
            u = u + coeff * (g / rr**3 - 3.0 * (g @ r) * r / rr**5)
        return u[comp]

    out = np.array([
        quad(integrand, -1.0, 1.0, args=(c,), limit=400, epsabs=1e-13, epsrel=1e-11)[0]
        for c in range(3)
    ])
    return out / (8.0 * np.pi * mu)


class TestInducedFlow:
    def test_far_field_is_net_stokeslet(self):
        f = arc_fiber(p=16, r=1.0)
        rng = np.random.default_rng(5)
        force = rng.standard_normal((f.n_nodes, 3))
        total = (f.node_weights()[:, None] * force).sum(axis=0)
        target = np.array([120.0, 40.0, -60.0])
        u = fiber_induced_velocity(f, force, target, mu=1.0)[0]
        u_point = kernels.stokeslet_apply(target - f.X[f.n_nodes // 2], total, 1.0)
        assert np.linalg.norm(u - u_point) < 0.02 * np.linalg.norm(u_point)

    def test_matches_adaptive_quadrature(self):
        rng = np.random.default_rng(7)
        target = np.array([1.4, 1.1, 0.6])
        for p, tol in ((24, 1e-4), (48, 1e-6)):
            f = arc_fiber(p=p, r=1.0)
            force = rng.standard_normal((f.n_nodes, 3))
            for dbl in (False, True):
                u = fiber_induced_velocity(f, force, target, mu=1.3, include_doublet=dbl)[0]
                u_ref = brute_induced_velocity(f, force, target, 1.3, include_doublet=dbl)
                assert np.linalg.norm(u - u_ref) < tol * np.linalg.norm(u_ref)

    def test_near_shell_raises_without_flag(self):
        f = straight_fiber(16, (0, 0, 0), (1, 0, 0), 2.0)
        h = f.L / f.p
        target = np.array([1.0, 0.5 * h, 0.0])
        force = np.tile([0.0, 1.0, 0.0], (f.n_nodes, 1))
        with pytest.raises(NearFieldError):
            fiber_induced_velocity(f, force, target, mu=1.0)
        fiber_induced_velocity(f, force, target, mu=1.0, allow_near=True)

    def test_near_eval_matches_oracle_straight_constant(self):
        f = straight_fiber(16, (0, 0, 0), (1, 0, 0), 2.0)
        force = np.tile([0.0, 1.0, 0.0], (f.n_nodes, 1))
        target = np.array([1.0, 0.3 * f.L / f.p, 0.0])
        u = near_fiber_eval(f, force, target, mu=1.0, include_doublet=True)
        u_ref = brute_induced_velocity(f, force, target, 1.0, include_doublet=True)
        assert np.linalg.norm(u - u_ref) < 1e-4 * np.linalg.norm(u_ref)

    def test_near_eval_matches_oracle_close_in(self):
        f = arc_fiber(p=24, r=1.0)
        rng = np.random.default_rng(9)
        force = rng.standard_normal((f.n_nodes, 3))
        h = f.L / f.p
        mid = f.n_nodes // 2
        normal = f.X[mid] / np.linalg.norm(f.X[mid])
        target = f.X[mid] + 0.3 * h * normal
        u = near_fiber_eval(f, force, target, mu=1.0)
        u_ref = brute_induced_velocity(f, force, target, 1.0)
        assert np.linalg.norm(u - u_ref) < 1e-4 * np.linalg.norm(u_ref)

    def test_near_eval_continuous_with_plain_sum(self):
        f = arc_fiber(p=24, r=1.0)
        rng = np.random.default_rng(13)
        force = rng.standard_normal((f.n_nodes, 3))
        h = f.L / f.p
        mid = f.n_nodes // 2
        normal = f.X[mid] / np.linalg.norm(f.X[mid])
        target = f.X[mid] + 1.5 * h * normal
        u_near = near_fiber_eval(f, force, target, mu=1.0)
        u_plain = fiber_induced_velocity(f, force, target, mu=1.0, allow_near=True)[0]
        assert np.linalg.norm(u_near - u_plain) < 1e-9 * np.linalg.norm(u_plain)

    def test_inside_fiber_rejected(self):
        f = straight_fiber(16, (0, 0, 0), (1, 0, 0), 2.0, eps=0.05)
        force = np.tile([0.0, 1.0, 0.0], (f.n_nodes, 1))
        target = np.array([1.0, 0.5 * f.eps * f.L, 0.0])
        with pytest.raises(InsideFiberError):
            near_fiber_eval(f, force, target, mu=1.0)


class TestReparam:
    def test_plus_end_moves_at_growth_speed(self):
        f = straight_fiber(16, (1, 2, 3), (0, 1, 0), 2.0, Ldot=0.1)
        v = reparam_velocity(f)
        assert np.allclose(v[0], [0.0, 0.1, 0.0], atol=1e-12)
        assert np.allclose(v[-1], 0.0, atol=1e-12)

    def test_scales_linearly_along_fiber(self):
        f = straight_fiber(16, (0, 0, 0), (1, 0, 0), 4.0, Ldot=-0.2)
        v = reparam_velocity(f)
        expect = (f.grid.nodes + 1.0) / 2.0 * (-0.2)
        assert np.allclose(v[:, 0], expect, atol=1e-12)


class TestKinetics:
    def test_stall_force_growth_speed(self):
        kin = GrowthKinetics()
        f = straight_fiber(16, (0, 0, 0), (0, 0, 1), 2.0, kinetics=kin,
                           growth_state=fib_mod.GROWING)
        end_load = kin.stall_force * np.array([0.0, 0.0, 1.0])
        v = growth_rate(f, end_load, kin.v_grow, kin.stall_force)
        assert v == pytest.approx(math.exp(-7.0 / 3.0) * kin.v_grow, rel=1e-12)

    def test_unloaded_and_pulled_growth(self):
        kin = GrowthKinetics()
        f = straight_fiber(16, (0, 0, 0), (0, 0, 1), 2.0, kinetics=kin,
                           growth_state=fib_mod.GROWING)
        assert growth_rate(f, np.zeros(3), kin.v_grow, kin.stall_force) == kin.v_grow
        pulled = growth_rate(f, [0, 0, -1.0], kin.v_grow, kin.stall_force)
        assert pulled > kin.v_grow

    def test_shrinking_rate(self):
        kin = GrowthKinetics()
        f = straight_fiber(16, (0, 0, 0), (0, 0, 1), 2.0, kinetics=kin,
                           growth_state=fib_mod.SHRINKING)
        assert growth_rate(f, np.zeros(3), kin.v_grow, kin.stall_force) == -kin.v_shrink

    def test_catastrophe_rate_values(self):
        a = 0.014 * 0.12
        v_slow = a / 0.5
        assert catastrophe_rate(v_slow, 0.12, 0.014, math.inf) == 0.5
        assert catastrophe_rate(0.12, 0.12, 0.014, math.inf) == pytest.approx(0.014)
        assert catastrophe_rate(0.12, 0.12, 0.014, 10.0) == pytest.approx(0.1)
        with pytest.raises(ValueError):
            catastrophe_rate(0.0, 0.12, 0.014, math.inf)

    def test_min_length_rescue(self):
        f = straight_fiber(16, (0, 0, 0), (0, 0, 1), 0.6,
                           growth_state=fib_mod.SHRINKING, Ldot=-0.288)
        rng = np.random.default_rng(0)
        state, ldot = polymerization_step(f, 1.0, rng)
        assert state == fib_mod.GROWING
        assert ldot == pytest.approx(-0.1)

    def test_catastrophe_statistics(self):
        kin = GrowthKinetics()
        rng = np.random.default_rng(42)
        n, dt, hits = 4000, 1.0, 0
        for _ in range(n):
            f = straight_fiber(8, (0, 0, 0), (0, 0, 1), 2.0, kinetics=kin,
                               growth_state=fib_mod.GROWING, Ldot=kin.v_grow)
            state, _ = polymerization_step(f, dt, rng)
            if state == fib_mod.SHRINKING:
                hits += 1
        q = -math.expm1(-kin.f_cat * dt)
        sigma = math.sqrt(n * q * (1 - q))
        assert abs(hits - n * q) < 3.0 * sigma

    def test_rescue_statistics(self):
        kin = GrowthKinetics()
        rng = np.random.default_rng(43)
        n, dt, hits = 4000, 1.0, 0
        for _ in range(n):
            f = straight_fiber(8, (0, 0, 0), (0, 0, 1), 2.0, kinetics=kin,
                               growth_state=fib_mod.SHRINKING, Ldot=-kin.v_shrink)
            state, _ = polymerization_step(f, dt, rng)
            if state == fib_mod.GROWING:
                hits += 1
        q = -math.expm1(-kin.f_res * dt)
        sigma = math.sqrt(n * q * (1 - q))
        assert abs(hits - n * q) < 3.0 * sigma


class TestBoundaryConditions:
    def test_free_end_residuals(self):
        f = straight_fiber(16, (0, 0, 0), (1, 0, 0), 2.0)
        res = bc_residuals(f, f.X, np.zeros(f.n_nodes))
        assert np.abs(res).max() < 1e-9

    def test_prescribed_force_residual_signs(self):
        f = straight_fiber(16, (0, 0, 0), (1, 0, 0), 2.0)
        F = np.array([2.0, 0.0, 0.0])
        f.bc_plus = PrescribedForceTorque(F)
        f.bc_minus = PrescribedForceTorque(F)
        T = np.full(f.n_nodes, 2.0)
        res = bc_residuals(f, f.X, T)
        # plus end satisfied by T = +F.t, minus end requires T = -F.t
        assert np.abs(res[:3]).max() < 1e-7
        assert res[12] == pytest.approx(0.0, abs=1e-7)
        assert np.abs(res[6:9] - np.array([4.0, 0.0, 0.0])).max() < 1e-7
        assert res[13] == pytest.approx(4.0)

    def test_prescribed_torque_enters_curvature_row(self):
        f = straight_fiber(16, (0, 0, 0), (1, 0, 0), 2.0, E=5.0)
        torque = np.array([0.0, 0.0, 3.0])
        f.bc_plus = PrescribedForceTorque(np.zeros(3), torque)
        res = bc_residuals(f, f.X, np.zeros(f.n_nodes))
        expect = -np.cross([1.0, 0, 0], torque) / 5.0
        assert np.allclose(res[3:6], expect, atol=1e-9)
        assert res[12] == pytest.approx(-(torque @ torque) / 5.0)

    def test_hinged_spring_balance(self):
        k = 2.5
        f = straight_fiber(16, (0.4, 0, 0), (1, 0, 0), 2.0)
        f.bc_minus = HingedToSurface(attachment=(0.0, 0.0, 0.0), stiffness=k)
        res = bc_residuals(f, f.X, np.zeros(f.n_nodes))
        spring = -k * np.array([0.4, 0.0, 0.0])
        assert np.allclose(res[6:9], +spring, atol=1e-9)
        assert res[13] == pytest.approx(spring[0])

    def test_clamped_velocity_rows(self):
        f = straight_fiber(12, (1, 0, 0), (1, 0, 0), 2.0)
        f.bc_minus = ClampedToBody(0, attach_point=(1, 0, 0), tangent=(1, 0, 0))
        dt = 0.1
        kin = dict(U=[0.0, 0.0, 1.0], omega=[0.0, 0.0, 0.0], center=[0.0, 0.0, 0.0], dt=dt)
        Xc = f.X + dt * np.array([0.0, 0.0, 1.0])
        res = bc_residuals(f, Xc, np.zeros(f.n_nodes), body_kinematics=kin, mu=1.0)
        assert np.abs(res[6:12]).max() < 1e-9

    def test_end_force_torque_tension_only(self):
        f = straight_fiber(16, (0, 0, 0), (1, 0, 0), 2.0)
        T = 1.0 + 0.5 * f.s
        F, L = end_force_torque(f, f.X, T)
        assert np.allclose(F, [1.0, 0.0, 0.0], atol=1e-9)
        assert np.allclose(L, 0.0, atol=1e-12)

    def test_end_torque_on_arc(self):
        r, E = 1.5, 4.0
        f = arc_fiber(r=r, E=E)
        _, L = end_force_torque(f, f.X, np.zeros(f.n_nodes))
        assert np.linalg.norm(L) == pytest.approx(E / r, rel=1e-8)
