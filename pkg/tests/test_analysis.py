import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.linalg import eigh

from vilab import analysis
from vilab.analysis import (NUMERICAL_FLOOR, RateModel, circle_battery, decay_exponent,
                            estimate_gamma, exponent_sphere_obstacle, exponent_sphere_thin,
                            fit_decay, fit_rate, h1_upgrade, loja_check, sottile_conditions,
                            spectral_split, stratified_battery, thin_source_battery)
from vilab.constraint import cone_set, constrained_grad_norm, obstacle_set, thin_set
from vilab.energy import (Obstacle, SphereObstacle, SphereThin, ThinObstacle, eval_energy,
                          eval_gradient)
from vilab.flow import run_flow
from vilab.geometry import GridKind, build_grid
from vilab.stationary import critical_distance, solve_obstacle


@pytest.fixture(scope="module")
def interval():
    G = build_grid(GridKind.INTERVAL, 65)
    K = obstacle_set(G, 1 / 8)
    phi = solve_obstacle(G, 1 / 8).solution
    return G, K, phi


def test_spectral_split_modes():
    C = build_grid(GridKind.CIRCLE, 64)
    th = C.angles
    u = 0.5 + np.cos(th) + 2 * np.sin(2 * th) + 3 * np.cos(3 * th)
    s = spectral_split(C, u, 4.0)
    assert_allclose(s.v_minus, 0.5 + np.cos(th), atol=1e-12)
    assert_allclose(s.v_zero, 2 * np.sin(2 * th), atol=1e-12)
    assert_allclose(s.v_plus, 3 * np.cos(3 * th), atol=1e-12)
    assert s.eigvals_used == [0, 1, 4, 9]
    assert s.gap == 5.0
    with pytest.raises(ValueError):
        spectral_split(C, u, 3.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_split_sums_back_and_parseval(seed):
    C = build_grid(GridKind.CIRCLE, 64)
    rng = np.random.default_rng(seed)
    c = rng.normal(size=8)
    u = sum(c[n] * np.cos(n * C.angles) for n in range(1, 8))
    s = spectral_split(C, u, 4.0)
    assert_allclose(s.v_minus + s.v_zero + s.v_plus, u, atol=1e-12)
    # F = 1/2 int (u'^2 - 4 u^2), and int cos^2(n t) = pi
    ref = 0.5 * np.pi * sum(c[n] ** 2 * (n * n - 4) for n in range(1, 8))
    assert_allclose(eval_energy(SphereThin(1), C, u), ref, rtol=1e-10, atol=1e-10)


def test_loja_at_minimizer(interval):
    G, K, phi = interval
    rep = loja_check(Obstacle(), K, phi, 0.5, [phi, phi.copy()])
    assert rep.violations == 0 and rep.C_fit == 0.0


def test_loja_infeasible_sample_raises(interval):
    G, K, phi = interval
    with pytest.raises(ValueError):
        loja_check(Obstacle(), K, phi, 0.5, [phi - 0.1])


def test_loja_bad_arguments(interval):
    G, K, phi = interval
    with pytest.raises(ValueError):
        loja_check(Obstacle(), K, phi, 0.6, [phi])
    with pytest.raises(ValueError):
        loja_check(Obstacle(), K, phi, 0.5, [phi], form="cube")


def _smallest_eig(G):
    """Lowest generalized eigenvalue of the stiffness against the mass on free nodes."""
    f = ~G.boundary_mask
    S = G.stiffness.toarray()[np.ix_(f, f)]
    return eigh(S, np.diag(G.weights[f]), eigvals_only=True)[0]


def test_strong_convexity_bound(interval):
    # oracle: F is lam1-convex, so F(u) - F(phi) <= R^2 / (2 lam1) on K
    G, K, phi = interval
    lam1 = _smallest_eig(G)
    assert_allclose(lam1, np.pi ** 2 / 4, rtol=1e-2)
    samples = stratified_battery(Obstacle(), K, phi, 60, seed=3)
    rep = loja_check(Obstacle(), K, phi, 0.5, samples)
    assert rep.violations == 0
    assert np.all(rep.gaps <= rep.k_norms ** 2 / (2 * lam1) + 1e-14)
    assert rep.C_fit <= np.sqrt(1 / (2 * lam1)) + 1e-12


def test_C_fit_bounded_across_decades(interval):
    G, K, phi = interval
    bound = np.sqrt(1 / (2 * _smallest_eig(G)))
    rng = np.random.default_rng(0)
    for scale in (1e-1, 1e-2, 1e-3):
        samples = analysis.mode_battery(K, phi, 20, rng, scales=(scale,))
        rep = loja_check(Obstacle(), K, phi, 0.5, samples)
        assert rep.violations == 0 and 0 < rep.C_fit <= bound + 1e-12


def test_thread_count_does_not_change_results(interval, monkeypatch):
    G, K, phi = interval
    samples = stratified_battery(Obstacle(), K, phi, 30, seed=1)
    monkeypatch.setenv("VILAB_THREADS", "1")
    a = loja_check(Obstacle(), K, phi, 0.5, samples)
    monkeypatch.setenv("VILAB_THREADS", "3")
    b = loja_check(Obstacle(), K, phi, 0.5, samples)
    assert np.array_equal(a.gaps, b.gaps) and np.array_equal(a.k_norms, b.k_norms)
    monkeypatch.setenv("VILAB_THREADS", "zero")
    assert analysis.n_threads() == 1


def test_thin_source_battery_structure():
    H = build_grid(GridKind.HALF_DISK_THIN, 16)
    x, y = H.coords.T
    K = thin_set(H, 0.5 * (x * x - y * y) + 0.1)
    samples = thin_source_battery(K, 9, seed=0)
    assert all(K.is_feasible(u) and sottile_conditions(K, u) for u in samples)
    assert not sottile_conditions(K, np.where(H.thin_mask, 1.0, 0.0) + K.pinned_values)


def test_circle_battery_within_delta():
    C = build_grid(GridKind.CIRCLE, 64)
    spec = SphereObstacle(1.0)
    K = cone_set(C)
    centers = [np.ones(64), 1 + 0.5 * np.cos(C.angles)]
    for u in circle_battery(spec, K, centers, 12, delta=0.05, seed=2):
        assert K.is_feasible(u)
        assert critical_distance(spec, C, u) <= 0.05


@pytest.mark.parametrize("gamma", [0.5, 0.25])
def test_estimate_gamma_synthetic(gamma):
    rng = np.random.default_rng(0)
    gaps = np.logspace(-8, -1, 60)
    R = 0.7 * gaps ** (1 - gamma) * np.exp(0.01 * rng.normal(size=60))
    g, half = estimate_gamma(np.column_stack([gaps, R]))
    assert abs(g - gamma) <= half + 1e-3
    assert half < 0.01


def test_estimate_gamma_rejects_bad_input():
    with pytest.raises(ValueError):
        estimate_gamma(np.ones((5, 2)))
    with pytest.raises(ValueError):
        estimate_gamma(np.ones((20, 2)))
    with pytest.raises(ValueError):
        estimate_gamma(np.column_stack([np.linspace(-1, 1, 20), np.ones(20)]))


def test_estimate_gamma_on_flow(interval):
    G, K, phi = interval
    b = np.exp(-(G.coords[:, 0] - 0.3) ** 2 / 0.02)
    b[G.boundary_mask] = 0
    tr = run_flow(Obstacle(), K, phi + 0.3 * b, 0.01, 3.0)
    F0 = eval_energy(Obstacle(), G, phi)
    pairs = [(E - F0, constrained_grad_norm(K, u, eval_gradient(Obstacle(), G, u)))
             for E, u in zip(tr.energies[1:], tr.states[1:]) if E - F0 > 1e-12]
    g, _ = estimate_gamma(pairs)
    assert g >= 0.45


def test_fit_decay_models():
    t = np.linspace(0.5, 10, 200)
    fe = fit_decay(t, 3 * np.exp(-2 * t))
    assert fe.model == RateModel.EXPONENTIAL
    assert_allclose(fe.params["rate"], 2.0, rtol=1e-10)
    assert fe.r2_exponential > 1 - 1e-12
    t = np.logspace(0, 3, 200)
    fp = fit_decay(t, (t + 0.5) ** -1.5)
    assert fp.model == RateModel.POWER
    assert_allclose(fp.params["exponent"], 1.5, rtol=1e-6)
    assert_allclose(fp.params["tau"], 0.5, rtol=1e-6)
    t = np.logspace(1, 4, 200)
    fl = fit_decay(t, (np.log(t) + 1.0) ** -2.0)
    assert fl.model == RateModel.LOGARITHMIC
    assert_allclose(fl.params["exponent"], 2.0, rtol=1e-6)


def test_fit_decay_window_and_floor():
    t = np.linspace(0, 10, 101)
    d = np.exp(-t)
    fit = fit_decay(t, d, window=(2, 5), gamma=0.25)
    assert fit.window == (2.0, 5.0)
    assert fit.predicted_exponent == 0.5
    with pytest.raises(ValueError):
        fit_decay(t, np.full(101, NUMERICAL_FLOOR / 2))
    with pytest.raises(ValueError):
        fit_decay(t, d, window=(2.0, 2.05))


def test_fit_rate_from_trajectory():
    from vilab.constraint import free_set
    from vilab.energy import FiniteDim
    from vilab.geometry import point_grid
    tr = run_flow(FiniteDim("sum_squares", 1), free_set(point_grid(1)), np.array([1.0]),
                  1e-3, 2.0)
    fit = fit_rate(tr, np.zeros(1), window=(0.1, 2.0))
    assert fit.model == RateModel.EXPONENTIAL
    # implicit Euler: log(1 + 2 dt) / dt
    assert_allclose(fit.params["rate"], np.log(1.002) / 1e-3, rtol=1e-10)


def test_exponent_helpers():
    assert decay_exponent(0.25) == 0.5
    assert_allclose(decay_exponent(1 / 3), 1.0)
    with pytest.raises(ValueError):
        decay_exponent(0.5)
    assert exponent_sphere_obstacle(2) == 0.25
    assert exponent_sphere_thin(2) == 0.5


def test_h1_upgrade_identity(interval):
    G, K, phi = interval
    b = np.exp(-(G.coords[:, 0] + 0.2) ** 2 / 0.02)
    b[G.boundary_mask] = 0
    for u in run_flow(Obstacle(), K, phi + 0.2 * b, 0.01, 0.3).states:
        lhs, rhs, rhs_ind = h1_upgrade(G, u, phi)
        assert abs(lhs - rhs) <= 1e-10 * (1 + lhs)
        assert lhs >= 0
    lhs, rhs, rhs_ind = h1_upgrade(G, phi, phi)
    assert lhs == 0 and abs(rhs) < 1e-14 and abs(rhs_ind) < 1e-14


def test_thin_energy_through_battery_is_above_minimum():
    H = build_grid(GridKind.HALF_DISK_THIN, 16)
    x, y = H.coords.T
    K = thin_set(H, 0.5 * (x * x - y * y) + 0.1)
    from vilab.stationary import solve_thin_obstacle
    phi = solve_thin_obstacle(H, K.pinned_values).solution
    F0 = eval_energy(ThinObstacle(), H, phi)
    for u in thin_source_battery(K, 6, seed=4):
        assert eval_energy(ThinObstacle(), H, u) >= F0 - 1e-12
