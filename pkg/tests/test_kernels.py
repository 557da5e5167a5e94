from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slenderflow.kernels import (
    KernelContext,
    SingularEvaluationError,
    doublet_apply,
    no_groups,
    rotlet_apply,
    stokeslet_apply,
    stokeslet_sum,
    stresslet_apply,
    stresslet_sum,
    stresslet_sum_subtracted,
)

COORD = st.floats(min_value=-3.0, max_value=3.0, allow_nan=False)


def vec(draw_min=0.2):
    return st.tuples(COORD, COORD, COORD).map(np.array).filter(
        lambda v: np.linalg.norm(v) > draw_min
    )


def test_context_requires_positive_viscosity():
    assert KernelContext(0.3).mu == 0.3
    with pytest.raises(ValueError):
        KernelContext(0.0)


def test_stokeslet_parallel_and_perpendicular():
    mu = 1.0 / (8.0 * np.pi)
    assert np.allclose(stokeslet_apply([1, 0, 0], [1, 0, 0], mu), [2, 0, 0])
    assert np.allclose(stokeslet_apply([0, 0, 1], [1, 0, 0], mu), [1, 0, 0])


def test_stokeslet_derived_value():
    u = stokeslet_apply([2, 0, 0], [0, 3, 0], 1.0)
    assert np.allclose(u, [0, 3.0 / (16.0 * np.pi), 0])


def test_stokeslet_singular():
    with pytest.raises(SingularEvaluationError):
        stokeslet_apply([0, 0, 0], [1, 0, 0], 1.0)


def test_stresslet_annihilation_and_value():
    assert np.allclose(stresslet_apply([1, 0, 0], [1, 0, 0], [0, 1, 0], 1.0), 0.0)
    assert np.allclose(stresslet_apply([1, 0, 0], [0, 1, 0], [1, 0, 0], 1.0), 0.0)
    u = stresslet_apply([1, 0, 0], [1, 0, 0], [1, 0, 0], 1.0)
    assert np.allclose(u, [-3.0 / (4.0 * np.pi), 0, 0])


def test_rotlet_values():
    assert np.allclose(rotlet_apply([2, 0, 0], [1, 0, 0], 1.0), 0.0)
    u = rotlet_apply([1, 0, 0], [0, 0, 1], 1.0 / (8.0 * np.pi))
    assert np.allclose(u, [0, 1, 0])
    # e_x x e_y = e_z; the sign is pinned by the half-curl identity below
    u = rotlet_apply([0, 2, 0], [1, 0, 0], 1.0)
    assert np.allclose(u, [0, 0, 1.0 / (32.0 * np.pi)])


def test_doublet_values():
    mu = 1.0 / (8.0 * np.pi)
    f = np.array([0.0, 0.0, 1.0])
    assert np.allclose(doublet_apply([0, 0, 1], f, mu), -2.0 * f)
    fp = np.array([1.0, 0.0, 0.0])
    assert np.allclose(doublet_apply([0, 0, 1], fp, mu), fp)
    u = doublet_apply([0, 0, 2], [1, 1, 0], 1.0)
    assert np.allclose(u, np.array([1, 1, 0]) / (64.0 * np.pi))


@settings(max_examples=40, deadline=None)
@given(r=vec(), f=vec(0.0))
def test_stokeslet_symmetry(r, f):
    assert np.allclose(stokeslet_apply(r, f, 0.7), stokeslet_apply(-r, f, 0.7))


@settings(max_examples=25, deadline=None)
@given(r=vec(), f=vec(0.0))
def test_stokeslet_incompressibility(r, f):
    h = 1e-4 * np.linalg.norm(r)
    div = 0.0
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        up = stokeslet_apply(r + e, f, 1.0)
        um = stokeslet_apply(r - e, f, 1.0)
        div += (up[k] - um[k]) / (2 * h)
    scale = np.linalg.norm(stokeslet_apply(r, f, 1.0)) / np.linalg.norm(r)
    assert abs(div) < 1e-6 * max(scale, 1e-30)


@settings(max_examples=25, deadline=None)
@given(r=vec(), L=vec(0.0))
def test_rotlet_is_half_curl_of_stokeslet(r, L):
    h = 1e-4 * np.linalg.norm(r)
    curl = np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        up = stokeslet_apply(r + e, L, 1.0)
        um = stokeslet_apply(r - e, L, 1.0)
        d = (up - um) / (2 * h)
        # d = du/dr_k; (curl u)_i = eps_{ikm} d_m
        curl[(k + 1) % 3] -= d[(k + 2) % 3]
        curl[(k + 2) % 3] += d[(k + 1) % 3]
    expect = rotlet_apply(r, L, 1.0)
    scale = np.linalg.norm(L) / np.linalg.norm(r) ** 2
    assert np.allclose(0.5 * curl, expect, atol=1e-6 * scale)


def test_stresslet_odd_in_r():
    r = np.array([0.3, -1.1, 0.7])
    n = np.array([0.0, 1.0, 0.0])
    q = np.array([2.0, 0.5, -1.0])
    assert np.allclose(
        stresslet_apply(-r, n, q, 1.3), -stresslet_apply(r, n, q, 1.3)
    )


def test_stokeslet_sum_matches_scalar_kernel():
    rng = np.random.default_rng(7)
    src = rng.standard_normal((40, 3))
    trg = rng.standard_normal((15, 3)) + 5.0
    f = rng.standard_normal((40, 3))
    mu = 0.9
    out, bad = stokeslet_sum(trg, no_groups(15), src, no_groups(40), f, 1.0 / (8 * np.pi * mu))
    assert bad == 0
    ref = np.array([sum(stokeslet_apply(t - s, fs, mu) for s, fs in zip(src, f)) for t in trg])
    assert np.allclose(out, ref, atol=1e-13)


def test_grouped_sum_excludes_own_group():
    src = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    f = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    sgrp = np.array([0, 1], dtype=np.int64)
    trg = np.array([[0.0, 0, 0]])
    tg = np.array([0], dtype=np.int64)
    out, bad = stokeslet_sum(trg, tg, src, sgrp, f, 1.0 / (8 * np.pi))
    assert bad == 0  # the coincident point is in the excluded group
    assert np.allclose(out[0], stokeslet_apply([-1.0, 0, 0], [0, 1.0, 0], 1.0))


def test_stresslet_sum_matches_scalar_kernel():
    rng = np.random.default_rng(3)
    src = rng.standard_normal((30, 3))
    nrm = rng.standard_normal((30, 3))
    nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    q = rng.standard_normal((30, 3))
    trg = rng.standard_normal((9, 3)) + 4.0
    mu = 1.1
    out, bad = stresslet_sum(
        trg, no_groups(9), src, no_groups(30), nrm, q, -3.0 / (4 * np.pi * mu)
    )
    assert bad == 0
    ref = np.array(
        [sum(stresslet_apply(t - s, n, qq, mu) for s, n, qq in zip(src, nrm, q)) for t in trg]
    )
    assert np.allclose(out, ref, atol=1e-13)


def test_subtracted_sum_kills_constant_density():
    rng = np.random.default_rng(11)
    nodes = rng.standard_normal((50, 3))
    nodes /= np.linalg.norm(nodes, axis=1)[:, None]
    w = rng.uniform(0.1, 0.3, 50)
    q = np.tile([0.4, -1.0, 2.0], (50, 1))
    out = stresslet_sum_subtracted(nodes, nodes.copy(), w, q, -3.0 / (4 * np.pi))
    assert np.max(np.abs(out)) == 0.0
