"""Implicit-Euler (proximal) time stepping of the constrained gradient flow

    <u' + grad F(u), v - u> >= 0   for all v in K,

plus explicit projected flows for the planar ODE examples.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .constraint import Constraint, constrained_grad_norm, project
from .energy import EnergySpec, eval_energy, eval_gradient, quadratic_form
from .geometry import Grid, GridKind
from .qp import BoundQP, SolverError


def default_dt(grid: Grid) -> float:
    """1e-3 on the circle; h^2/2 on ball grids (explicit-scale steps)."""
    if grid.kind == GridKind.CIRCLE:
        return 1e-3
    if grid.kind == GridKind.POINTS:
        return 1e-2
    return grid.spacing ** 2 / 2


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_steps + 1, n_nodes)
    energies: np.ndarray
    step_norms: np.ndarray  # entry 0 is nan: no step has been taken yet
    k_norms: np.ndarray
    dt: float
    spec: EnergySpec = None
    constraint: Constraint = None
    grid: Grid = None
    stopped_early: bool = False

    def __len__(self):
        return self.times.shape[0]


class ImplicitStepper:
    """Reusable proximal step v = argmin_K ||v-u||^2/(2dt) + F(v)."""

    def __init__(self, spec: EnergySpec, K: Constraint, dt: float, tol: float = 1e-8):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.spec, self.K, self.dt, self.tol = spec, K, float(dt), tol
        self.grid = K.grid
        A, self.b = quadratic_form(spec, self.grid)
        self.A = A
        w = self.grid.weights
        if sp.issparse(A):
            H = (A + sp.diags(w / dt)).tocsr()
        else:
            H = A + np.diag(w / dt)
        if spec.growth * dt >= 1:
            raise ValueError("dt must satisfy lam*dt < 1 for a convex proximal step")
        self.qp = BoundQP(H, K.pinned_mask, K.sign_mask)

    def gradient(self, u):
        return (self.A @ u + self.b) / self.grid.weights

    def step(self, u):
        w = self.grid.weights
        res = self.qp.solve(self.b - w * u / self.dt, self.K.pinned_values, x0=u)
        v = res.x
        g = self.gradient(v)
        vel = (v - u) / self.dt
        r = constrained_grad_norm(self.K, v, vel + g, check=False)
        scale = 1.0 + np.sqrt(np.sum(w * g * g)) + np.sqrt(np.sum(w * vel * vel))
        if not r <= self.tol * scale:
            raise SolverError(f"discrete variational inequality residual {r:.3e}", r, v)
        return v, g


def step_implicit(spec: EnergySpec, K: Constraint, u, dt: float, tol: float = 1e-8):
    """One proximal step from a feasible u."""
    u = K.grid.check_field(u)
    K.require_feasible(u)
    return ImplicitStepper(spec, K, dt, tol).step(u)[0]


def run_flow(spec: EnergySpec, K: Constraint, u0, dt: float = None, t_end: float = 1.0,
             stop: float = None, tol: float = 1e-8, on_step=None) -> Trajectory:
    """Iterate proximal steps up to t_end, or until F drops to ``stop``.

    ``on_step(k, t, u)`` is called after every accepted step (used to stream
    partial records).
    """
    grid = K.grid
    u = grid.check_field(u0).copy()
    K.require_feasible(u)
    dt = default_dt(grid) if dt is None else float(dt)
    n_steps = int(np.ceil(t_end / dt - 1e-9))
    stepper = ImplicitStepper(spec, K, dt, tol)
    w = grid.weights

    states = [u]
    g = stepper.gradient(u)
    energies = [eval_energy(spec, grid, u)]
    k_norms = [constrained_grad_norm(K, u, g)]
    step_norms = [np.nan]
    stopped = False
    for k in range(1, n_steps + 1):
        v, g = stepper.step(u)
        states.append(v)
        energies.append(eval_energy(spec, grid, v))
        k_norms.append(constrained_grad_norm(K, v, g, check=False))
        d = (v - u) / dt
        step_norms.append(float(np.sqrt(np.sum(w * d * d))))
        u = v
        if on_step is not None:
            on_step(k, k * dt, v)
        if stop is not None and energies[-1] <= stop:
            stopped = True
            break
    m = len(states)
    return Trajectory(dt * np.arange(m), np.array(states), np.array(energies),
                      np.array(step_norms), np.array(k_norms), dt, spec, K, grid, stopped)


@dataclass
class IdentityReport:
    max_rel_err_i: float
    max_rel_err_iii: float
    monotone: bool
    n_checked: int
    mode: str = "backward"


def verify_flow_identities(traj: Trajectory, mode: str = "backward", window=None,
                           floor: float = 1e-12, slack: float = 1e-10) -> IdentityReport:
    """Discrepancies of ||u'||^2 = -u'.grad F(u) and ||u'|| = ||grad F(u)||_K.

    u' is the difference quotient (u_{k+1} - u_k)/dt.  In ``backward`` mode the
    identities are evaluated at u_{k+1}, where the discrete variational
    inequality holds exactly; in ``forward`` mode at u_k, which measures the
    first-order consistency of the scheme with the continuous flow.
    """
    if len(traj) < 2:
        raise ValueError("need at least one step")
    if mode not in ("backward", "forward"):
        raise ValueError("mode is 'backward' or 'forward'")
    grid, K, spec = traj.grid, traj.constraint, traj.spec
    w = grid.weights
    A, b = quadratic_form(spec, grid)
    vel = np.diff(traj.states, axis=0) / traj.dt
    sn = np.sqrt(np.sum(w * vel * vel, axis=1))
    cut = floor * max(1.0, sn.max())
    ei = eiii = 0.0
    n = 0
    for k in range(vel.shape[0]):
        j = k + 1 if mode == "backward" else k
        t = traj.times[j]
        if window is not None and not (window[0] <= t <= window[1]):
            continue
        if sn[k] <= cut:
            continue
        u = traj.states[j]
        g = (A @ u + b) / w
        lhs = sn[k] ** 2
        rhs = -float(np.sum(w * vel[k] * g))
        ei = max(ei, abs(lhs - rhs) / lhs)
        kn = constrained_grad_norm(K, u, g, check=False)
        eiii = max(eiii, abs(sn[k] - kn) / sn[k])
        n += 1
    E = traj.energies
    mono = bool(np.all(np.diff(E) <= slack * np.maximum(1.0, np.abs(E[:-1]))))
    return IdentityReport(ei, eiii, mono, n, mode)


@dataclass
class ContinuityReport:
    sup_ratio: float
    times: np.ndarray
    distances: np.ndarray
    lam: float


def continuity_probe(spec: EnergySpec, K: Constraint, u0, v0, dt: float = None,
                     t_end: float = 1.0) -> ContinuityReport:
    """sup_t ||u(t)-v(t)|| / (e^{lam t} ||u0-v0||) for two flows from u0, v0."""
    tu = run_flow(spec, K, u0, dt, t_end)
    tv = run_flow(spec, K, v0, dt, t_end)
    w = K.grid.weights
    diff = tu.states - tv.states
    dist = np.sqrt(np.sum(w * diff * diff, axis=1))
    lam = spec.growth
    if dist[0] == 0:
        return ContinuityReport(0.0, tu.times, dist, lam)
    ratio = dist / (np.exp(lam * tu.times) * dist[0])
    return ContinuityReport(float(ratio.max()), tu.times, dist, lam)


# --- planar ODE examples -------------------------------------------------------

class OdeProblem(str, Enum):
    ANALYTIC = "AnalyticConstraint"  # y >= x^2
    NON_ANALYTIC = "NonAnalyticConstraint"  # y >= exp(-1/x^2)
    FREE_QUADRATIC = "FreeQuadratic"  # F = |p|^2, no constraint


def eta(problem: OdeProblem, x):
    x = np.asarray(x, dtype=float)
    if problem == OdeProblem.ANALYTIC:
        return x * x
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(x == 0, 0.0, np.exp(-1.0 / np.where(x == 0, 1.0, x) ** 2))


def eta_prime(problem: OdeProblem, x):
    x = np.asarray(x, dtype=float)
    if problem == OdeProblem.ANALYTIC:
        return 2 * x
    safe = np.where(x == 0, 1.0, x)
    return np.where(x == 0, 0.0, 2.0 / safe ** 3 * eta(problem, x))


def _eta_second(problem, x):
    if problem == OdeProblem.ANALYTIC:
        return 2.0
    return eta(problem, x) * (4.0 / x ** 6 - 6.0 / x ** 4) if x != 0 else 0.0


def _graph_projection(problem, zx, zy):
    """Closest point on the graph of eta to (zx, zy), by Newton in s."""
    s = zx
    for _ in range(50):
        e, ep = float(eta(problem, s)), float(eta_prime(problem, s))
        f = (s - zx) + (e - zy) * ep
        fp = 1.0 + ep * ep + (e - zy) * _eta_second(problem, s)
        ds = f / fp
        s -= ds
        if abs(ds) <= 1e-15 * (1 + abs(s)):
            break
    return s, float(eta(problem, s))


def ode_energy(problem: OdeProblem, p) -> float:
    p = np.asarray(p, dtype=float)
    if problem == OdeProblem.FREE_QUADRATIC:
        return float(p @ p)
    return float(p[1] ** 2)


def ode_gradient(problem: OdeProblem, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if problem == OdeProblem.FREE_QUADRATIC:
        return 2 * p
    return np.array([0.0, 2 * p[1]])


def ode_k_norm(problem: OdeProblem, p, on_graph: bool) -> float:
    """Norm of the gradient projected on the tangent cone of {y >= eta(x)}."""
    g = ode_gradient(problem, p)
    if problem == OdeProblem.FREE_QUADRATIC or not on_graph:
        return float(np.hypot(*g))
    n = np.array([-float(eta_prime(problem, p[0])), 1.0])  # inward normal
    n /= np.hypot(*n)
    gn = g @ n
    # -g pointing out of K (gn > 0) loses its normal part
    d = -g + (gn * n if gn > 0 else 0.0)
    return float(np.hypot(*d))


def run_ode_flow(problem, x0, dt: float, t_end: float, max_rel_step: float = None,
                 feas_tol: float = 1e-12) -> Trajectory:
    """Explicit projected-gradient integration of p' = -P_T grad F(p).

    After each explicit step a point that left K is mapped to its closest
    point on the graph of eta.  With ``max_rel_step`` the step size follows
    the local time scale: it is grown or shrunk so each step moves the state
    by about that fraction of its norm (needed to cover t ~ 1e6).
    """
    problem = OdeProblem(problem)
    p = np.array(x0, dtype=float)
    constrained = problem != OdeProblem.FREE_QUADRATIC
    if constrained and p[1] < float(eta(problem, p[0])) - feas_tol:
        raise ValueError("x0 lies below the graph of eta")
    t = 0.0
    h = float(dt)
    times, states = [0.0], [p.copy()]
    steps = [np.nan]
    on = constrained and abs(p[1] - float(eta(problem, p[0]))) <= feas_tol
    knorms = [ode_k_norm(problem, p, on)]
    while t < t_end * (1 - 1e-14):
        h_eff = min(h, t_end - t)
        z = p - h_eff * ode_gradient(problem, p)
        on = False
        if constrained:
            e = float(eta(problem, z[0]))
            if z[1] < e:
                z = np.array(_graph_projection(problem, z[0], z[1]))
                on = True
            if z[1] < float(eta(problem, z[0])) - max(feas_tol, 1e-12 * abs(z[1])):
                raise SolverError("explicit step left the constraint set; reduce dt")
        move = float(np.hypot(*(z - p)))
        if max_rel_step is not None and move > 2 * max_rel_step * np.hypot(*p) and h_eff > dt:
            h = max(dt, h / 2)
            continue
        t += h_eff
        steps.append(move / h_eff)
        p = z
        times.append(t)
        states.append(p.copy())
        knorms.append(ode_k_norm(problem, p, on))
        if max_rel_step is not None and move > 0:
            h = min(1.5 * h, max(dt, h * max_rel_step * np.hypot(*p) / move))
            if not on:
                h = min(h, 0.25)  # free y-dynamics y' = -2y needs h < 1
    states = np.array(states)
    return Trajectory(np.array(times), states,
                      np.array([ode_energy(problem, s) for s in states]),
                      np.array(steps), np.array(knorms), float(dt))
