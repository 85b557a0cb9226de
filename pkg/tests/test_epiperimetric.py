import numpy as np
import pytest
import sympy as sp
from numpy.testing import assert_allclose

from vilab.constraint import cone_set, thin_set
from vilab.energy import SphereObstacle, SphereThin, weiss_energy
from vilab.epiperimetric import (EpiProblem, HypothesisError, alpha_cap, assemble,
                                 build_competitor, check_log_epi, epi_gamma,
                                 homogeneous_extension, ob_battery, ring_times,
                                 slice_energy, th_battery, theta_obstacle)
from vilab.geometry import GridKind, build_grid
from vilab.stationary import make_QA


def _pair(n, n_circle=64):
    return build_grid(GridKind.DISK, n, n_theta=n_circle), build_grid(GridKind.CIRCLE, n_circle)


def test_homogeneous_extension_values():
    D, C = _pair(16)
    z = homogeneous_extension(2, np.cos(2 * C.angles), D, C)
    x, y = D.coords.T
    assert_allclose(z, x * x - y * y, atol=1e-12)
    z1 = homogeneous_extension(1, np.ones(64), D, C)
    assert_allclose(z1, np.hypot(x, y), atol=1e-12)


def test_extension_mass_against_closed_form():
    r, t = sp.symbols("r t", positive=True)
    # z = r^2 cos(2t): int z^2 = int_0^1 r^5 dr * pi
    exact = float(sp.integrate(r ** 4 * sp.cos(2 * t) ** 2 * r, (r, 0, 1), (t, 0, 2 * sp.pi)))
    errs = []
    for n in (16, 32):
        D, C = _pair(n)
        z = homogeneous_extension(2, np.cos(2 * C.angles), D, C)
        errs.append(abs(np.sum(D.weights * z * z) - exact))
    assert errs[1] < errs[0] and errs[1] < 1e-3


def test_mismatched_grids():
    D = build_grid(GridKind.DISK, 16, n_theta=32)
    C = build_grid(GridKind.CIRCLE, 64)
    with pytest.raises(ValueError):
        homogeneous_extension(2, np.ones(64), D, C)


def test_slice_of_radius_is_exact():
    r, t = sp.symbols("r t", positive=True)
    # H = r, k = 1: int |grad H|^2 - int_{boundary} H^2
    exact = float(sp.integrate(r, (r, 0, 1), (t, 0, 2 * sp.pi)) - 2 * sp.pi)
    C = build_grid(GridKind.CIRCLE, 64)
    val = slice_energy(1, np.ones((9, 64)), C)
    assert_allclose(val, exact, rtol=1e-13)
    assert_allclose(exact, -np.pi)


def test_theta_value():
    r, t = sp.symbols("r t", positive=True)
    Q = r ** 2 / 4
    weiss = sp.integrate((r / 2) ** 2 * r, (r, 0, 1), (t, 0, 2 * sp.pi)) \
        - 2 * sp.integrate(Q.subs(r, 1) ** 2, (t, 0, 2 * sp.pi))
    exact = sp.nsimplify(weiss / 2 + sp.integrate(Q * r, (r, 0, 1), (t, 0, 2 * sp.pi)))
    assert exact == sp.pi / 16
    assert_allclose(theta_obstacle(), float(exact), rtol=1e-12)


def test_slice_conventions():
    C = build_grid(GridKind.CIRCLE, 32)
    fam = np.ones((5, 32))
    base = slice_energy(2, fam, C)
    assert_allclose(slice_energy(2, fam, C, convention="th"), base / 2)
    with pytest.raises(ValueError):
        slice_energy(1, fam, C, convention="ob")
    with pytest.raises(ValueError):
        slice_energy(2, fam, C, convention="other")


def test_slice_matches_disk_energy_to_second_order():
    # the angular resolution refines with the disk, so the trace is analytic
    errs = []
    for n in (16, 32, 64):
        D = build_grid(GridKind.DISK, n)
        C = build_grid(GridKind.CIRCLE, D.n_theta)
        c = 0.8 * np.cos(2 * C.angles) + 0.3 * np.cos(3 * C.angles + 0.4)
        cp = build_competitor(SphereThin(1), thin_set(C), c, radii=D.radii)
        H = assemble(2, cp.h, D, C)
        errs.append(abs(weiss_energy(2, D, H, "th") - cp.g_h))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(ratios > 3), (errs, ratios)


def test_critical_traces_are_trivial():
    C = build_grid(GridKind.CIRCLE, 64)
    cp = build_competitor(SphereThin(1), thin_set(C), np.cos(2 * C.angles))
    assert cp.trivial and cp.g_h == cp.g_z
    q = make_QA(np.diag([0.3, 0.2]), C)
    cp = build_competitor(SphereObstacle(4.0), cone_set(C), q)
    assert cp.trivial


def test_competitor_improves_energy():
    C = build_grid(GridKind.CIRCLE, 64)
    th = C.angles
    c = np.cos(2 * th) + 0.2 * np.cos(4 * th)
    K = thin_set(C)
    cp = build_competitor(SphereThin(1), K, c)
    assert cp.g_h < cp.g_z
    assert 0 < cp.alpha <= alpha_cap(2)
    assert np.array_equal(cp.h[-1], c)
    assert all(K.is_feasible(row) for row in cp.h)


def test_ring_times():
    t = ring_times(0.2, [0.0, np.exp(-1), 1.0])
    assert t[0] == np.inf and t[2] == 0
    assert_allclose(t[1], 0.2)


def test_alpha_cap_and_gamma():
    assert alpha_cap(2) == 0.25
    assert_allclose(alpha_cap(4, c_sl=1.0), min(0.5 / np.sqrt(8), 1 / 16))
    assert epi_gamma("OB", 2) == 0 and epi_gamma("TH", 2) == 0
    assert_allclose(epi_gamma(EpiProblem.OB, 3), 1 / 3)
    assert_allclose(epi_gamma(EpiProblem.TH, 4), 0.5)
    with pytest.raises(ValueError):
        epi_gamma("OB", 1)


def test_hypothesis_violation():
    C = build_grid(GridKind.CIRCLE, 64)
    with pytest.raises(HypothesisError):
        check_log_epi("TH", [2 * np.cos(2 * C.angles)], C)
    far = make_QA(np.diag([0.3, 0.2]), C) + 0.5
    with pytest.raises(HypothesisError):
        check_log_epi("OB", [far], C)


def test_batteries_pass():
    C = build_grid(GridKind.CIRCLE, 64)
    ob = check_log_epi("OB", ob_battery(C, 6, seed=1), C, n_radii=33)
    th = check_log_epi("TH", th_battery(C, 6, seed=1), C, n_radii=33)
    for rep in (ob, th):
        assert rep.passed and rep.n_skipped == 0 and rep.n_elements == 6
    assert np.all(th.g_h <= th.g_z)
