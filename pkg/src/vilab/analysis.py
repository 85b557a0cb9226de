"""Spectral splits on the circle, constrained Lojasiewicz batteries, exponent
estimates and decay-rate fits."""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import stats
from scipy.optimize import minimize_scalar

from .constraint import Constraint, constrained_grad_norm, project
from .energy import EnergySpec, eval_energy, eval_gradient, f_gamma, quadratic_form
from .geometry import Grid, GridKind, norm
from .qp import BoundQP

NUMERICAL_FLOOR = 1e-13


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("VILAB_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Order-preserving map bounded by VILAB_THREADS."""
    items = list(items)
    k = n_threads()
    if k == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=k) as ex:
        return list(ex.map(fn, items))


# --- spectral split ------------------------------------------------------------

@dataclass
class SpectralSplit:
    v_minus: np.ndarray
    v_zero: np.ndarray
    v_plus: np.ndarray
    eigvals_used: list
    gap: float


def spectral_split(grid: Grid, u, lam: float) -> SpectralSplit:
    """Split a circle field into Fourier modes with n^2 below, at and above lam."""
    if grid.kind != GridKind.CIRCLE:
        raise ValueError("spectral_split needs a Circle grid")
    n0 = int(round(np.sqrt(lam)))
    if abs(n0 * n0 - lam) > 1e-9:
        raise ValueError(f"lam = {lam} is not in the circle spectrum")
    u = grid.check_field(u)
    uh = np.fft.fft(u)
    k2 = np.fft.fftfreq(grid.n, d=1.0 / grid.n) ** 2
    parts = [np.real(np.fft.ifft(uh * m)) for m in (k2 < lam, k2 == lam, k2 > lam)]
    present = np.abs(uh) > 1e-12 * (np.abs(uh).max() + 1e-300)
    used = sorted(set(int(v) for v in k2[present]))
    return SpectralSplit(*parts, used, float((n0 + 1) ** 2 - n0 ** 2))


# --- Lojasiewicz batteries -----------------------------------------------------

@dataclass
class LojaReport:
    gamma: float
    C_fit: float
    violations: int
    n_samples: int
    form: str = "ball"
    energy_cap: float = 0.0  # largest energy gap in the battery
    C_fit_power: float = 0.0  # max gap_+^{1-gamma} / R (sphere forms)
    gaps: np.ndarray = field(default=None, repr=False)
    lhs: np.ndarray = field(default=None, repr=False)
    k_norms: np.ndarray = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def loja_check(spec: EnergySpec, K: Constraint, phi, gamma: float, samples,
               form: str = "ball", level: float = None) -> LojaReport:
    """Evaluate L(u) <= C ||grad F(u)||_K over a battery of feasible fields.

    ``form='ball'``: L = (F(u) - F(phi))_+^{1-gamma};
    ``form='sphere'``: L = f_gamma(F(u) - level), level defaulting to F(phi).
    """
    if form not in ("ball", "sphere"):
        raise ValueError("form is 'ball' or 'sphere'")
    if not 0 < gamma <= 0.5:
        raise ValueError("gamma must lie in (0, 1/2]")
    grid = K.grid
    if level is None:
        level = eval_energy(spec, grid, phi)

    def one(u):
        u = grid.check_field(u)
        if not K.is_feasible(u):
            raise ValueError("sampler produced an infeasible field")
        gap = eval_energy(spec, grid, u) - level
        R = constrained_grad_norm(K, u, eval_gradient(spec, grid, u), check=False)
        return gap, R

    out = np.array(parallel_map(one, samples), dtype=float).reshape(-1, 2)
    gaps, R = out[:, 0], out[:, 1]
    pos = np.maximum(gaps, 0.0)
    power = pos ** (1 - gamma)
    L = f_gamma(gamma, gaps) if form == "sphere" else power
    L = np.atleast_1d(L)
    # relative floor: an energy gap at round-off level is not a positive left side
    scale = max(1.0, abs(level))
    L = np.where(gaps > 1e-14 * scale, L, 0.0)
    ok = R > 0
    C = float(np.max(L[ok] / R[ok])) if ok.any() else 0.0
    Cp = float(np.max(power[ok] / R[ok])) if ok.any() else 0.0
    viol = int(np.sum(~ok & (L > 0)))
    return LojaReport(gamma, C, viol, len(gaps), form, float(gaps.max(initial=0.0)), Cp,
                      gaps, L, R)


def _smooth_modes(grid: Grid, rng, n_modes: int = 6):
    """Random smooth field vanishing on the boundary, with a few low modes."""
    x = grid.coords
    if grid.kind == GridKind.INTERVAL:
        k = rng.integers(1, 9, n_modes)
        c = rng.normal(size=n_modes) / k
        s = x[:, 0] + 1
        return np.sum(c[None] * np.sin(np.outer(s, k) * np.pi / 2), axis=1)
    if grid.kind == GridKind.CIRCLE:
        th = grid.angles
        k = rng.integers(0, 9, n_modes)
        c = rng.normal(size=n_modes) / (1 + k)
        ph = rng.uniform(0, 2 * np.pi, n_modes)
        return np.sum(c[None] * np.cos(np.outer(th, k) + ph[None]), axis=1)
    r = np.hypot(x[:, 0], x[:, 1])
    th = np.arctan2(x[:, 1], x[:, 0])
    k = rng.integers(0, 7, n_modes)
    c = rng.normal(size=n_modes) / (1 + k)
    if grid.kind == GridKind.HALF_DISK_THIN:
        ph = np.zeros(n_modes)  # even in x_2
    else:
        ph = rng.uniform(0, 2 * np.pi, n_modes)
    f = np.sum(c[None] * r[:, None] ** k[None] * np.cos(np.outer(th, k) + ph[None]), axis=1)
    return (1 - r * r) * f


def _bump(grid: Grid, rng):
    """Nonnegative Gaussian bump vanishing on the boundary."""
    x = grid.coords
    c = rng.uniform(-0.7, 0.7, x.shape[1]) / np.sqrt(x.shape[1])
    wd = rng.uniform(0.1, 0.4)
    b = np.exp(-np.sum((x - c) ** 2, axis=1) / wd ** 2)
    b[grid.boundary_mask] = 0.0
    return b


def bump_battery(K: Constraint, phi, n: int, rng, scales=(1e-1, 1e-2, 1e-3)):
    """phi + t * (nonnegative bump), t cycling through the given scales."""
    grid = K.grid
    return [project(K, phi + scales[i % len(scales)] * _bump(grid, rng)) for i in range(n)]


def mode_battery(K: Constraint, phi, n: int, rng, scales=(1e-1, 1e-2, 1e-3)):
    """Projection of phi + t * (random low-mode mixture) onto K."""
    grid = K.grid
    out = []
    for i in range(n):
        v = _smooth_modes(grid, rng)
        v = v / max(norm(grid, v), 1e-300)
        out.append(project(K, phi + scales[i % len(scales)] * v))
    return out


def flow_battery(spec: EnergySpec, K: Constraint, starts, dt: float, t_end: float,
                 n_snap: int = 5):
    """Snapshots of flows started from the given fields."""
    from .flow import run_flow

    out = []
    for u0 in starts:
        tr = run_flow(spec, K, u0, dt, t_end)
        idx = np.unique(np.linspace(1, len(tr) - 1, n_snap).astype(int))
        out.extend(tr.states[i] for i in idx)
    return out


def stratified_battery(spec: EnergySpec, K: Constraint, phi, n: int, seed: int = 0,
                       dt: float = None, t_end: float = 0.5):
    """Equal thirds of bump, mode-mixture and flow-snapshot samples."""
    rng = np.random.default_rng(seed)
    n_b = n // 3
    n_m = n // 3
    n_f = n - n_b - n_m
    samples = bump_battery(K, phi, n_b, rng) + mode_battery(K, phi, n_m, rng)
    n_starts = max(1, int(np.ceil(n_f / 5)))
    starts = mode_battery(K, phi, n_starts, rng, scales=(0.3, 0.1))
    snaps = flow_battery(spec, K, starts, dt if dt else 0.02, t_end, 5)
    return samples + snaps[:n_f]


def sottile_conditions(K: Constraint, u, tol: float = 1e-9) -> bool:
    """Discrete thin-set sign structure: flux (S u)_j >= 0 and u_j (S u)_j = 0."""
    grid = K.grid
    flux = grid.stiffness @ u
    t = grid.thin_mask & ~K.pinned_mask
    scale = tol * (1 + np.max(np.abs(flux)))
    return bool(np.all(flux[t] >= -scale) and np.all(np.abs(u[t] * flux[t]) <= scale))


def thin_source_battery(K: Constraint, n: int, seed: int = 0, scales=(1.0, 0.1, 0.01)):
    """Thin-obstacle minimizers under random interior sources.

    u = argmin_K 1/2 u.S.u - <f, u> with f supported off the thin set, so the
    thin-set complementarity holds exactly while u ranges over a family of
    non-critical states of the unforced problem.
    """
    grid = K.grid
    rng = np.random.default_rng(seed)
    qp = BoundQP(grid.stiffness, K.pinned_mask, K.sign_mask)
    out = []
    for i in range(n):
        f = _smooth_modes(grid, rng) * scales[i % len(scales)]
        f[grid.thin_mask] = 0.0
        out.append(qp.solve(-grid.weights * f, K.pinned_values).x)
    return out


def circle_battery(spec: EnergySpec, K: Constraint, centers, n: int, delta: float = 0.05,
                   seed: int = 0):
    """Feasible fields within L2 distance delta of the critical set.

    Each sample is a critical point plus a random low/high mode mixture,
    projected onto K; samples farther than delta are shrunk toward their
    centre until they fit.
    """
    from .stationary import critical_distance

    grid = K.grid
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        psi = centers[i % len(centers)]
        v = _smooth_modes(grid, rng, n_modes=8)
        v *= delta * rng.uniform(0.01, 1.0) / max(norm(grid, v), 1e-300)
        for _ in range(60):
            u = project(K, psi + v)
            if critical_distance(spec, grid, u) <= delta:
                break
            v *= 0.7
        out.append(u)
    return out


# --- exponent estimate and rate fits ------------------------------------------

def estimate_gamma(pairs):
    """gamma-hat from the slope of log R against log(gap): R ~ gap^{1-gamma}.

    Returns (gamma_hat, half_width of a 95% confidence interval).
    """
    a = np.asarray(pairs, dtype=float)
    if a.ndim != 2 or a.shape[1] != 2 or a.shape[0] < 10:
        raise ValueError("need at least 10 (gap, k_norm) pairs")
    if np.any(a <= 0):
        raise ValueError("pairs must be positive")
    x, y = np.log(a[:, 0]), np.log(a[:, 1])
    if np.ptp(x) == 0:
        raise ValueError("degenerate input: all gaps equal")
    res = stats.linregress(x, y)
    half = float(stats.t.ppf(0.975, len(x) - 2) * res.stderr)
    return 1.0 - float(res.slope), half


class RateModel(str, Enum):
    EXPONENTIAL = "Exponential"
    POWER = "Power"
    LOGARITHMIC = "Logarithmic"


@dataclass
class RateFit:
    model: RateModel
    params: dict
    residual: float
    window: tuple
    residuals: dict = field(default_factory=dict)
    all_params: dict = field(default_factory=dict)
    r2_exponential: float = np.nan
    predicted_exponent: float = None


def _lin_fit(X, y):
    A = np.column_stack([np.ones_like(X), X])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    r = A @ coef - y
    return coef, float(np.sqrt(np.mean(r * r)))


def _shift_search(make_X, y, lo, hi):
    """Minimize the linear-fit residual over a scalar shift in [lo, hi]."""
    grid = np.linspace(lo, hi, 201)
    res = [_lin_fit(make_X(s), y)[1] for s in grid]
    i = int(np.argmin(res))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    if b > a:
        opt = minimize_scalar(lambda s: _lin_fit(make_X(s), y)[1], bounds=(a, b),
                              method="bounded", options={"xatol": 1e-12 * (1 + abs(b))})
        s = float(opt.x) if opt.fun <= res[i] else float(grid[i])
    else:
        s = float(grid[i])
    coef, r = _lin_fit(make_X(s), y)
    return s, coef, r


def fit_decay(times, dists, window=None, gamma: float = None) -> RateFit:
    """Fit log d(t) by three decay laws and report the best.

    Exponential  log d = a - b t
    Power        log d = a - p log(t + tau),        |tau| <= t_min
    Logarithmic  log d = a - q log(log(t) + beta),  log(t_min) + beta in [0.1, 50]

    The shifts are profiled out by a bounded scalar search.  The bound on tau
    keeps the power law from imitating an exponential with a huge shift.
    """
    t = np.asarray(times, dtype=float)
    d = np.asarray(dists, dtype=float)
    if window is None:
        window = (float(t[0]), float(t[-1]))
    m = (t >= window[0]) & (t <= window[1]) & (t > 0)
    t, d = t[m], d[m]
    if t.size < 3:
        raise ValueError("window holds fewer than 3 samples")
    if np.all(d < NUMERICAL_FLOOR):
        raise ValueError("distance is below the numerical floor over the whole window")
    keep = d >= NUMERICAL_FLOOR
    t, d = t[keep], d[keep]
    y = np.log(d)
    t0 = float(t.min())

    coef_e, r_e = _lin_fit(t, y)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - r_e ** 2 * y.size / ss if ss > 0 else 1.0

    tau, coef_p, r_p = _shift_search(lambda s: np.log(t + s), y, -0.9 * t0, t0)
    lt0 = np.log(t0)
    beta, coef_l, r_l = _shift_search(lambda s: np.log(np.log(t) + s), y, 0.1 - lt0, 50 - lt0)

    params = {
        RateModel.EXPONENTIAL: {"a": float(coef_e[0]), "rate": float(-coef_e[1])},
        RateModel.POWER: {"a": float(coef_p[0]), "exponent": float(-coef_p[1]), "tau": tau},
        RateModel.LOGARITHMIC: {"a": float(coef_l[0]), "exponent": float(-coef_l[1]),
                                "beta": beta},
    }
    res = {RateModel.EXPONENTIAL: r_e, RateModel.POWER: r_p, RateModel.LOGARITHMIC: r_l}
    best = min(res, key=res.get)
    pred = None
    if gamma is not None and 0 < gamma < 0.5:
        pred = gamma / (1 - 2 * gamma)
    return RateFit(best, params[best], res[best], (float(t[0]), float(t[-1])), res, params,
                   r2, pred)


def fit_rate(traj, target, window=None, gamma: float = None) -> RateFit:
    """Decay fit of ||u(t) - target|| along a trajectory."""
    diff = traj.states - np.asarray(target, dtype=float)[None]
    if traj.grid is not None:
        dist = np.sqrt(np.sum(traj.grid.weights * diff * diff, axis=1))
    else:
        dist = np.sqrt(np.sum(diff * diff, axis=1))
    return fit_decay(traj.times, dist, window, gamma)


def decay_exponent(gamma: float) -> float:
    """Algebraic rate gamma/(1 - 2 gamma) of the Lojasiewicz decay estimate."""
    if not 0 < gamma < 0.5:
        raise ValueError("the algebraic rate needs 0 < gamma < 1/2")
    return gamma / (1 - 2 * gamma)


def exponent_sphere_obstacle(d: int) -> float:
    """gamma = 1/(d+2), d the dimension of the manifold carrying the flow."""
    return 1.0 / (d + 2)


def exponent_sphere_thin(d: int) -> float:
    """gamma = 1/d on the sphere of R^d."""
    return 1.0 / d


# --- H^1 upgrade along the obstacle flow ---------------------------------------

def h1_distance(grid: Grid, u, phi) -> float:
    e = np.asarray(u) - np.asarray(phi)
    return float(np.sqrt(max(e @ (grid.stiffness @ e), 0.0)))


def h1_upgrade(grid: Grid, u, phi, spec: EnergySpec = None):
    """Sides of the H^1 upgrade identity along the obstacle flow.

    lhs        int |grad(u - phi)|^2
    rhs        2(F(u) - F(phi)) - 2 int (u - phi)(1 - Lap_h phi)
    rhs_ind    2(F(u) - F(phi)) - 2 int_{phi=0} (u - phi)

    rhs uses the discrete Laplacian of the discrete solution, which equals 1
    on {phi > 0}; it matches lhs up to round-off.  rhs_ind replaces Lap_h phi by
    the indicator 1_{phi>0}; the two differ only on contact nodes, by the
    quadrature term 2 sum_{phi_j=0} w_j (u - phi)_j Lap_h phi_j.
    """
    from .constraint import CONTACT_RTOL
    from .energy import Obstacle

    spec = spec or Obstacle()
    u = grid.check_field(u)
    phi = grid.check_field(phi)
    e = u - phi
    lhs = h1_distance(grid, u, phi) ** 2
    gap2 = 2 * (eval_energy(spec, grid, u) - eval_energy(spec, grid, phi))
    lap = -(grid.stiffness @ phi) / grid.weights
    contact = phi <= CONTACT_RTOL * (1 + np.max(np.abs(phi)))
    rhs = gap2 - 2 * float(np.sum(grid.weights * e * (1 - lap)))
    rhs_ind = gap2 - 2 * float(np.sum(grid.weights * e * contact))
    return lhs, rhs, rhs_ind
