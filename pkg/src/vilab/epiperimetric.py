"""Slicing of boundary-adjusted energies into spherical ones, the stopped-flow
competitor h(r, t) = u(-alpha log r, t), and (log-)epiperimetric batteries on
the unit disk (d = 2).

Radial families.  A field H on the disk is stored through its rescaled family
u(r, .) = r^{-k} H(r, .), one circle field per radius.  With p = 2k + d - 3

    G_k(H) = int_0^1 F(u(r)) r^p dr + int_0^1 r^{p+2} int |d_r u|^2 dr,

F(v) = int |v'|^2 - k(k+d-2) int v^2.  The obstacle and thin variants use
the halved form (slicing constant 1/2) and the obstacle adds the linear term
int_0^1 r^{k+d-1} int u dr.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .analysis import parallel_map, circle_battery
from .constraint import Constraint, cone_set, project, thin_set
from .energy import (EnergyKind, EnergySpec, SphereObstacle, SphereThin, eval_energy,
                     lambda_of, weiss_energy)
from .flow import Trajectory, run_flow
from .geometry import Grid, GridKind, build_grid, norm
from .stationary import critical_distance, critical_level, make_QA

D = 2  # only planar disks are discretized


def _check_pair(disk: Grid, circle: Grid):
    if disk.kind != GridKind.DISK or circle.kind != GridKind.CIRCLE:
        raise ValueError("need a Disk grid and a Circle grid")
    if disk.n_theta != circle.n or not np.allclose(disk.angles, circle.angles, atol=1e-14):
        raise ValueError("disk rings do not match the circle grid")


def homogeneous_extension(k: int, c, disk: Grid, circle: Grid) -> np.ndarray:
    """z(r, t) = r^k c(t) on the disk nodes."""
    _check_pair(disk, circle)
    c = circle.check_field(c)
    return assemble(k, np.repeat(c[None], disk.n + 1, axis=0), disk, circle)


def assemble(k: int, family, disk: Grid, circle: Grid) -> np.ndarray:
    """Disk field r^k u(r, .) from a family sampled on the disk radii."""
    _check_pair(disk, circle)
    family = np.asarray(family, dtype=float)
    if family.shape != (disk.n + 1, circle.n):
        raise ValueError("family must have one circle field per disk radius")
    H = np.empty(disk.n_nodes)
    H[0] = float(np.mean(family[0])) if k == 0 else 0.0
    for i in range(1, disk.n + 1):
        H[disk.ring(i)] = disk.radii[i] ** k * family[i]
    return H


def _hat_moments(radii, q):
    """omega_i = int l_i(r) r^q dr for the piecewise-linear hats on radii."""
    r = np.asarray(radii, dtype=float)
    om = np.zeros(r.shape[0])
    a, b = r[:-1], r[1:]
    I1 = (b ** (q + 1) - a ** (q + 1)) / (q + 1)
    I2 = (b ** (q + 2) - a ** (q + 2)) / (q + 2)
    h = b - a
    om[1:] += (I2 - a * I1) / h  # rising half of hat i on [r_{i-1}, r_i]
    om[:-1] += (b * I1 - I2) / h  # falling half of hat i on [r_i, r_{i+1}]
    return om


def slice_parts(k: int, family, circle: Grid, radii=None):
    """(spherical term, radial term, linear term) of the sliced energy.

    spherical  int F(u(r)) r^p dr     (product integration in r)
    radial     int r^{p+2} int |d_r u|^2 dr   (exact for u linear between radii)
    linear     int r^{k+d-1} int u dr
    """
    family = np.asarray(family, dtype=float)
    if family.ndim != 2 or family.shape[1] != circle.n:
        raise ValueError("family rows must be circle fields")
    n_r = family.shape[0]
    radii = np.linspace(0.0, 1.0, n_r) if radii is None else np.asarray(radii, dtype=float)
    if radii.shape != (n_r,):
        raise ValueError("one radius per family row")
    p = 2 * k + D - 3
    lam = k * (k + D - 2)
    w = circle.weights
    S = circle.stiffness
    F = np.einsum("ij,ij->i", family, family @ S) - lam * (family ** 2) @ w
    spherical = float(_hat_moments(radii, p) @ F)
    dr = np.diff(radii)
    mom = (radii[1:] ** (p + 3) - radii[:-1] ** (p + 3)) / (p + 3)
    du = np.diff(family, axis=0) / dr[:, None]
    radial = float(mom @ ((du ** 2) @ w))
    linear = float(_hat_moments(radii, k + D - 1) @ (family @ w))
    return spherical, radial, linear


def slice_energy(k: int, family, circle: Grid, radii=None, convention: str = "keyGk"):
    """Sliced value of the energy of H = r^k u(r, .); see the module docstring."""
    s, r, lin = slice_parts(k, family, circle, radii)
    if convention == "keyGk":
        return s + r
    if convention == "ob":
        if k != 2:
            raise ValueError("the obstacle energy is sliced at k = 2")
        return 0.5 * (s + r) + lin
    if convention == "th":
        return 0.5 * (s + r)
    raise ValueError(f"unknown convention {convention!r}")


def theta_obstacle(n_circle: int = 256) -> float:
    """Energy level of the flat obstacle profile Q_{I/4} = |x|^2/4 (k = 2)."""
    circle = build_grid(GridKind.CIRCLE, n_circle)
    c = make_QA(np.eye(2) / 4, circle)
    return slice_energy(2, np.array([c, c]), circle, convention="ob")


class EpiProblem(str, Enum):
    OB = "OB"
    TH = "TH"


def epi_gamma(problem, d: int) -> float:
    """Exponent of the log-epiperimetric inequality in dimension d."""
    problem = EpiProblem(problem)
    if d < 2:
        raise ValueError("d >= 2")
    if problem == EpiProblem.OB:
        return 0.0 if d == 2 else (d - 1) / (d + 3)
    return (d - 2) / d


def problem_setup(problem, circle: Grid, m: int = 1):
    """(sphere energy, constraint, homogeneity k, convention) of a problem."""
    problem = EpiProblem(problem)
    if problem == EpiProblem.OB:
        return SphereObstacle(lambda_of(2, D)), cone_set(circle), 2, "ob"
    return SphereThin(m, D), thin_set(circle), 2 * m, "th"


def alpha_cap(k: int, d: int = D, c_sl: float = 0.5) -> float:
    """Largest stopping time keeping the decrement sign-definite.

    G(h) - G(z) = -int_0^alpha (1/beta - c_sl*alpha) |u'|^2 e^{-beta t/alpha} dt
    with beta = 2k + d - 2; the cap keeps c_sl*alpha <= 1/(2 beta) and
    alpha <= beta^{-1/2}/2.
    """
    beta = 2 * k + d - 2
    return min(0.5 / np.sqrt(beta), 1.0 / (2 * c_sl * beta))


@dataclass
class Competitor:
    alpha: float
    sphere_traj: Trajectory
    h: np.ndarray  # family u(r_i, .), one row per radius
    g_z: float
    g_h: float
    theta_ref: float
    k: int = 2
    radii: np.ndarray = field(default=None, repr=False)
    trivial: bool = False


def ring_times(alpha: float, radii) -> np.ndarray:
    r = np.asarray(radii, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(r > 0, -alpha * np.log(np.where(r > 0, r, 1.0)), np.inf)


def _interp_states(traj: Trajectory, times, c):
    """Linear interpolation in t; constant beyond the last state; exact c at t = 0."""
    T = traj.times[-1]
    out = np.empty((len(times), traj.states.shape[1]))
    for i, t in enumerate(times):
        if t == 0:
            out[i] = c
        elif t >= T:
            out[i] = traj.states[-1]
        else:
            j = int(np.searchsorted(traj.times, t, side="right")) - 1
            j = min(max(j, 0), len(traj.times) - 2)
            s = (t - traj.times[j]) / (traj.times[j + 1] - traj.times[j])
            out[i] = (1 - s) * traj.states[j] + s * traj.states[j + 1]
    return out


def build_competitor(spec: EnergySpec, K: Constraint, c, eps_fl: float = 1.0,
                     dt: float = 1e-3, radii=None, theta: float = None) -> Competitor:
    """Stopped-flow competitor for the trace c.

    The flow runs from c until the energy gap halves or until
    alpha = min(eps_fl, alpha_cap); rings at radius r read u(-alpha log r).
    """
    circle = K.grid
    c = circle.check_field(c).copy()
    if not K.is_feasible(c):
        raise ValueError("trace is not feasible")
    if spec.kind == EnergyKind.SPHERE_OBSTACLE:
        k, conv = 2, "ob"
    elif spec.kind == EnergyKind.SPHERE_THIN:
        k, conv = 2 * spec.m, "th"
    else:
        raise ValueError("build_competitor needs a sphere energy")
    radii = np.linspace(0.0, 1.0, 65) if radii is None else np.asarray(radii, dtype=float)
    if theta is None:
        theta = theta_obstacle() if conv == "ob" else 0.0
    z = np.repeat(c[None], radii.shape[0], axis=0)
    g_z = slice_energy(k, z, circle, radii, conv)
    level = critical_level(spec, circle)
    gap0 = eval_energy(spec, circle, c) - level
    scale = 1.0 + abs(level)
    if gap0 <= 1e-13 * scale:
        traj = Trajectory(np.zeros(1), c[None].copy(), np.array([gap0 + level]),
                          np.array([np.nan]), np.array([np.nan]), dt, spec, K, circle)
        return Competitor(0.0, traj, z, g_z, g_z, theta, k, radii, trivial=True)
    horizon = min(eps_fl, alpha_cap(k))
    traj = run_flow(spec, K, c, dt, horizon, stop=level + 0.5 * gap0)
    alpha = float(traj.times[-1])
    fam = _interp_states(traj, ring_times(alpha, radii), c)
    fam[-1] = c  # outer ring carries the trace bit-for-bit
    g_h = slice_energy(k, fam, circle, radii, conv)
    return Competitor(alpha, traj, fam, g_z, g_h, theta, k, radii)


class HypothesisError(ValueError):
    """A battery trace violates the smallness hypotheses."""


@dataclass
class EpiReport:
    problem: str
    gamma_used: float
    worst_epsilon: float
    n_elements: int
    n_skipped: int
    never_worse: bool
    trace_exact: bool
    epsilons: np.ndarray = field(default=None, repr=False)
    alphas: np.ndarray = field(default=None, repr=False)
    g_z: np.ndarray = field(default=None, repr=False)
    g_h: np.ndarray = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return bool(self.worst_epsilon > 0 and self.never_worse and self.trace_exact)


def check_hypotheses(problem, spec: EnergySpec, circle: Grid, c, delta: float,
                     theta: float):
    problem = EpiProblem(problem)
    if problem == EpiProblem.OB:
        dist = critical_distance(spec, circle, c)
        if dist > delta * (1 + 1e-12):
            return f"distance {dist:.3e} to the critical set exceeds delta = {delta}"
        gz = slice_energy(2, np.array([c, c]), circle, convention="ob")
        if gz - theta > 1:
            return f"G(z) - Theta = {gz - theta:.3e} exceeds 1"
    else:
        mass = norm(circle, c) ** 2
        if mass > 1 + 1e-12:
            return f"int c^2 = {mass:.3e} exceeds 1"
    return None


def check_log_epi(problem, traces, circle: Grid, m: int = 1, eps_fl: float = 1.0,
                  dt: float = 1e-3, n_radii: int = 65, delta: float = 0.05) -> EpiReport:
    """Worst epsilon-hat over a battery of traces.

    eps = (1 - (G(h) - Theta)/(G(z) - Theta)) / |G(z) - Theta|^gamma, d = 2.
    Elements with G(z) <= Theta take the trivial competitor and are skipped.
    """
    problem = EpiProblem(problem)
    spec, K, k, conv = problem_setup(problem, circle, m)
    theta = theta_obstacle() if problem == EpiProblem.OB else 0.0
    gamma = epi_gamma(problem, D)
    radii = np.linspace(0.0, 1.0, n_radii)
    traces = [circle.check_field(c) for c in traces]
    for i, c in enumerate(traces):
        msg = check_hypotheses(problem, spec, circle, c, delta, theta)
        if msg:
            raise HypothesisError(f"trace {i}: {msg}")

    def one(c):
        return build_competitor(spec, K, c, eps_fl, dt, radii, theta)

    comps = parallel_map(one, traces)
    eps, alphas, gz, gh = [], [], [], []
    skipped = 0
    never_worse, exact = True, True
    for c, cp in zip(traces, comps):
        gz.append(cp.g_z)
        gh.append(cp.g_h)
        alphas.append(cp.alpha)
        exact &= bool(np.array_equal(cp.h[-1], c))
        gap = cp.g_z - theta
        if cp.trivial or gap <= 0:
            skipped += 1
            eps.append(np.nan)
            continue
        never_worse &= bool(cp.g_h <= cp.g_z)
        eps.append((1 - (cp.g_h - theta) / gap) / abs(gap) ** gamma)
    eps = np.array(eps)
    finite = eps[np.isfinite(eps)]
    worst = float(finite.min()) if finite.size else np.nan
    return EpiReport(problem.value, gamma, worst, len(traces), skipped, never_worse, exact,
                     eps, np.array(alphas), np.array(gz), np.array(gh))


# --- batteries ------------------------------------------------------------------

def random_QA(rng) -> np.ndarray:
    """Random symmetric nonnegative 2x2 matrix with trace 1/2."""
    a = rng.uniform(0, 0.5)
    rot = rng.uniform(0, np.pi)
    R = np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
    return R @ np.diag([a, 0.5 - a]) @ R.T


def ob_battery(circle: Grid, n: int, delta: float = 0.05, seed: int = 0,
               min_gap: float = 1e-10):
    """Feasible traces within delta of perturbed Q_A traces, with G(z) > Theta.

    Candidates whose energy sits at or below the critical level take the
    trivial competitor, so they are rejected here to keep every element
    informative.
    """
    rng = np.random.default_rng(seed)
    spec = SphereObstacle(lambda_of(2, D))
    K = cone_set(circle)
    level = critical_level(spec, circle)
    out = []
    for _ in range(50):
        centers = [make_QA(random_QA(rng), circle) for _ in range(n)]
        cand = circle_battery(spec, K, centers, n, delta, seed=int(rng.integers(2 ** 31)))
        out += [c for c in cand if eval_energy(spec, circle, c) - level > min_gap]
        if len(out) >= n:
            return out[:n]
    raise RuntimeError("could not draw enough traces above the critical level")


def th_battery(circle: Grid, n: int, m: int = 1, seed: int = 0, max_mode: int = 8):
    """Traces a cos(2m t) + b sin(2m t) + higher modes, feasible, int c^2 <= 1."""
    rng = np.random.default_rng(seed)
    K = thin_set(circle)
    th = circle.angles
    out = []
    for _ in range(n):
        a = rng.uniform(0.0, 1.0)
        b = rng.normal(0, 0.3)
        c = a * np.cos(2 * m * th) + b * np.sin(2 * m * th)
        for j in range(2 * m + 1, max_mode + 1):
            c += rng.normal(0, 0.3) / j * np.cos(j * th + rng.uniform(0, 2 * np.pi))
        c = project(K, c)
        c *= rng.uniform(0.2, 1.0) / max(norm(circle, c), 1e-300)
        out.append(c)
    return out
