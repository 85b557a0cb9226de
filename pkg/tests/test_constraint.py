import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.optimize import lsq_linear

from vilab.constraint import (Constraint, ConstraintKind, constrained_grad_norm,
                              obstacle_set, project, tangent_clip, thin_set)
from vilab.geometry import Grid, GridKind, build_grid


def points(w):
    n = len(w)
    z = np.zeros(n, bool)
    return Grid(GridKind.POINTS, n, np.eye(n), np.asarray(w, float), z, z.copy(), 1.0, None,
                np.zeros(n))


def sign_cone(w, sign=None, pinned=None, pv=None):
    n = len(w)
    sign = np.ones(n, bool) if sign is None else np.asarray(sign)
    pinned = np.zeros(n, bool) if pinned is None else np.asarray(pinned)
    pv = np.zeros(n) if pv is None else np.asarray(pv, float)
    return Constraint(ConstraintKind.POSITIVE_EVERYWHERE, points(w), sign, pinned, pv)


def test_project_full_clip():
    G = build_grid(GridKind.INTERVAL, 9)
    K = obstacle_set(G, 0.0)
    assert_allclose(project(K, -np.ones(9)), 0.0)


def test_project_feasible_is_fixed():
    G = build_grid(GridKind.INTERVAL, 9)
    K = obstacle_set(G, 0.3)
    u = project(K, np.linspace(-1, 1, 9))
    assert np.array_equal(project(K, u), u)


def test_pinned_values_must_be_nonnegative_on_sign_nodes():
    with pytest.raises(ValueError):
        sign_cone([1, 1], pinned=[True, False], pv=[-1, 0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_project_matches_bounded_least_squares(seed):
    rng = np.random.default_rng(seed)
    n = 20
    w = rng.uniform(0.5, 2, n)
    sign = rng.random(n) < 0.7
    pinned = rng.random(n) < 0.2
    pv = np.where(pinned, rng.uniform(0, 1, n), 0)
    K = sign_cone(w, sign, pinned, pv)
    u = rng.normal(size=n)
    # oracle: min ||W^{1/2}(v - u)|| with bounds, pins as equal bounds
    lo = np.where(sign, 0.0, -np.inf)
    hi = np.full(n, np.inf)
    lo[pinned], hi[pinned] = pv[pinned] - 1e-15, pv[pinned] + 1e-15
    A = np.diag(np.sqrt(w))
    ref = lsq_linear(A, A @ u, bounds=(lo, hi), tol=1e-14).x
    assert_allclose(project(K, u), ref, atol=1e-10)


def test_two_node_example_against_random_search():
    K = sign_cone([1, 1])
    u = np.array([0.0, 1.0])
    g = np.array([-2.0, 3.0])
    closed = constrained_grad_norm(K, u, g)
    assert_allclose(closed, np.sqrt(13))
    # oracle: random feasible v, sup of -<v-u, g>/||v-u|| approached from below
    rng = np.random.default_rng(1)
    v = np.column_stack([rng.uniform(0, 2, 10 ** 6), rng.uniform(-2, 4, 10 ** 6)])
    d = v - u
    q = -(d @ g) / np.linalg.norm(d, axis=1)
    assert q.max() <= closed + 1e-12
    assert q.max() > closed - 1e-3
    assert_allclose(tangent_clip(K, u, g), [2.0, -3.0])


def test_interior_is_plain_norm():
    w = np.array([0.5, 1.0, 2.0])
    K = sign_cone(w)
    g = np.array([1.0, -2.0, 0.5])
    assert_allclose(constrained_grad_norm(K, np.ones(3), g), np.sqrt(np.sum(w * g * g)))
    assert_allclose(tangent_clip(K, np.ones(3), g), -g)


def test_critical_point_has_zero_norm():
    K = sign_cone([1, 1])
    assert constrained_grad_norm(K, np.array([0.0, 1.0]), np.array([2.0, 0.0])) == 0.0
    assert np.all(tangent_clip(K, np.array([0.0, 1.0]), np.zeros(2)) == 0)


def test_infeasible_is_rejected():
    K = sign_cone([1, 1])
    with pytest.raises(ValueError):
        constrained_grad_norm(K, np.array([-1.0, 1.0]), np.ones(2))


def test_thin_set_circle_equator():
    C = build_grid(GridKind.CIRCLE, 16)
    K = thin_set(C)
    assert K.sign_mask.sum() == 2
    assert_allclose(np.sort(C.angles[K.sign_mask]), [0, np.pi])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_clip_norm_consistency_and_dominance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 15))
    w = rng.uniform(0.5, 2, n)
    pinned = rng.random(n) < 0.2
    pv = np.where(pinned, rng.uniform(0, 1, n), 0)
    K = sign_cone(w, rng.random(n) < 0.7, pinned, pv)
    u = project(K, rng.normal(size=n))
    g = rng.normal(size=n)
    d = tangent_clip(K, u, g)
    nk = constrained_grad_norm(K, u, g)
    assert nk == np.sqrt(np.sum(w * d * d))
    assert nk <= np.sqrt(np.sum((w * g * g)[~pinned])) + 1e-14
